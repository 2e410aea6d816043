//! Supervised HAR heads on pretrained encoders and two-stream fusion.
//!
//! Fine-tuning keeps the encoder frozen except, optionally, its last
//! convolution. Activations below the first trainable layer are computed once
//! and cached for the whole run.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contrastive::{Encoder, Featurizer, Stream};
use crate::dataio::{LabelMap, SignalWindow, SplitAudit};
use crate::error::{Error, Result};
use crate::nn::{
    accumulate, join, scale, softmax, zeros_like, AdamConfig, AdamState, EpochRecord, Mlp, ModelCheckpoint, Module,
    ParamKind, Precision, Tensor,
};
use crate::rng::RngStream;
use crate::wavelet::ScaleGrid;

pub const DEFAULT_FUSION_WEIGHT: f64 = 0.5;

/// Byte budget for cached intermediate activations during fine-tuning.
const ACTIVATION_CACHE_BYTES: usize = 1 << 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    pub batch_size: usize,
    #[serde(default = "yes")]
    pub unfreeze_last_conv: bool,
    /// Epochs without a new best validation loss before stopping.
    pub patience: usize,
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    /// Train encoder and head from random initialization, ignoring any
    /// pretrained weights.
    #[serde(default)]
    pub fully_supervised: bool,
}

fn yes() -> bool {
    true
}

impl FinetuneConfig {
    /// 70 epochs for the signal stream, 50 for the scalogram stream.
    pub fn new(stream: Stream, seed: u64) -> Self {
        Self {
            epochs: match stream {
                Stream::Signal => 70,
                Stream::Scalogram => 50,
            },
            adam: AdamConfig::default(),
            batch_size: 128,
            unfreeze_last_conv: true,
            patience: 10,
            seed,
            precision: Precision::Double,
            fully_supervised: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidParams("epochs must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::InvalidParams("patience must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParams("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn hyperparameters(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Negative log-probability of `label`.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    match probs.get(label) {
        Some(&p) => Ok(-p.max(f64::MIN_POSITIVE).ln()),
        None => Err(Error::BadLabel {
            label,
            classes: probs.len(),
        }),
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Unweighted mean of two probability vectors.
pub fn fuse_scores(p_sig: &[f64], p_sca: &[f64]) -> Result<Vec<f64>> {
    if p_sig.len() != p_sca.len() {
        return Err(Error::LengthMismatch(p_sig.len(), p_sca.len()));
    }
    Ok(p_sig.iter().zip(p_sca).map(|(a, b)| 0.5 * a + 0.5 * b).collect())
}

/// `w * p_sig + (1 - w) * p_sca`.
pub fn fuse_scores_weighted(p_sig: &[f64], p_sca: &[f64], w: f64) -> Result<Vec<f64>> {
    if p_sig.len() != p_sca.len() {
        return Err(Error::LengthMismatch(p_sig.len(), p_sca.len()));
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::InvalidParams(format!("fusion weight must lie in [0, 1], got {w}")));
    }
    Ok(p_sig.iter().zip(p_sca).map(|(a, b)| w * a + (1.0 - w) * b).collect())
}

/// Class probabilities of the fusion head over concatenated embeddings.
pub fn fuse_features(e_sig: &[f64], e_sca: &[f64], head: &Mlp) -> Result<Vec<f64>> {
    let x = [e_sig, e_sca].concat();
    if x.len() != head.in_dim() {
        return Err(Error::bad_shape(head.in_dim(), x.len()));
    }
    head.probabilities(&x)
}

/// Stream named by a pretraining or HAR architecture id.
pub fn checkpoint_stream(architecture: &str) -> Result<Stream> {
    let mut parts = architecture.split(':');
    match (parts.next(), parts.next()) {
        (Some("pretrain" | "har"), Some("signal")) => Ok(Stream::Signal),
        (Some("pretrain" | "har"), Some("scalogram")) => Ok(Stream::Scalogram),
        _ => Err(Error::UnknownArch(architecture.to_string())),
    }
}

fn featurizer_for(stream: Stream, grid: Option<&ScaleGrid>) -> Result<Featurizer> {
    match (stream, grid) {
        (Stream::Signal, _) => Ok(Featurizer::Signal),
        (Stream::Scalogram, Some(g)) => Featurizer::new(stream, g),
        (Stream::Scalogram, None) => Err(Error::CorruptManifest("scalogram checkpoint without scale grid".into())),
    }
}

/// Encoder plus HAR head: the trainable part of a classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct HarNet {
    pub encoder: Encoder,
    pub head: Mlp,
}

impl Module for HarNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// A fine-tuned single-stream classifier.
#[derive(Debug, Clone)]
pub struct HarModel {
    pub net: HarNet,
    pub labels: Vec<String>,
    pub scale_grid: Option<ScaleGrid>,
    featurizer: Featurizer,
}

impl HarModel {
    pub fn new(net: HarNet, labels: Vec<String>, scale_grid: Option<ScaleGrid>) -> Result<Self> {
        if net.head.out_dim() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "head has {} outputs for {} labels",
                net.head.out_dim(),
                labels.len()
            )));
        }
        let featurizer = featurizer_for(net.encoder.stream(), scale_grid.as_ref())?;
        Ok(Self {
            net,
            labels,
            scale_grid,
            featurizer,
        })
    }

    pub fn stream(&self) -> Stream {
        self.net.encoder.stream()
    }

    pub fn classes(&self) -> usize {
        self.labels.len()
    }

    pub fn featurizer(&self) -> &Featurizer {
        &self.featurizer
    }

    pub fn embed(&self, w: &SignalWindow) -> Result<Vec<f64>> {
        self.net.encoder.embed(&self.featurizer.input(w)?)
    }

    pub fn embed_batch(&self, ws: &[&SignalWindow]) -> Result<Vec<Vec<f64>>> {
        ws.par_iter().map(|w| self.embed(w)).collect()
    }

    /// Class probabilities for one window; no augmentation.
    pub fn predict_scores(&self, w: &SignalWindow) -> Result<Vec<f64>> {
        self.net.head.probabilities(&self.embed(w)?)
    }

    pub fn predict_batch(&self, ws: &[&SignalWindow]) -> Result<Vec<Vec<f64>>> {
        ws.par_iter().map(|w| self.predict_scores(w)).collect()
    }

    pub fn to_checkpoint(&self, seed: u64) -> ModelCheckpoint {
        let mut ck = ModelCheckpoint::new(format!("har:{}", self.stream()), seed);
        ck.push_module("", &self.net);
        ck.manifest.label_map = Some(self.labels.clone());
        ck.manifest.scale_grid = self.scale_grid.clone();
        ck
    }

    pub fn from_checkpoint(ck: &ModelCheckpoint) -> Result<Self> {
        let arch = &ck.manifest.architecture;
        if !arch.starts_with("har:") {
            return Err(Error::UnknownArch(arch.clone()));
        }
        let stream = checkpoint_stream(arch)?;
        let labels = ck
            .manifest
            .label_map
            .clone()
            .ok_or_else(|| Error::CorruptManifest("HAR checkpoint without label map".into()))?;
        let mut net = HarNet {
            encoder: Encoder::standard(stream),
            head: Mlp::har(labels.len()),
        };
        ck.restore_into("", &mut net)?;
        Self::new(net, labels, ck.manifest.scale_grid.clone())
    }
}

/// Training history of a head.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
}

fn labels_of(ws: &[&SignalWindow], classes: usize, audit: Option<&SplitAudit>) -> Result<Vec<usize>> {
    ws.iter()
        .map(|w| {
            if let Some(a) = audit {
                a.check(w)?;
            }
            match w.label {
                None => Err(Error::LabelsMissing(format!("window of subject `{}` has no label", w.subject))),
                Some(l) if l >= classes => Err(Error::BadLabel { label: l, classes }),
                Some(l) => Ok(l),
            }
        })
        .collect()
}

/// Minibatch Adam with early stopping on validation loss.
///
/// `item` accumulates one example's gradient and returns its loss; `val`
/// returns the mean validation loss or `None` when there is no validation
/// set, in which case the training loss decides which weights are kept.
fn fit<M, I, V>(
    model: &mut M,
    n_train: usize,
    item: I,
    val: V,
    cfg: &FinetuneConfig,
    trainable: impl Fn(&str) -> bool,
) -> Result<FitReport>
where
    M: Module + Clone + Send + Sync,
    I: Fn(&M, usize, &mut M) -> Result<f64> + Sync,
    V: Fn(&M) -> Result<Option<f64>>,
{
    let root = RngStream::new(cfg.seed, 0xF1);
    let mut adam = AdamState::default();
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, M)> = None;
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut root.derive(&[epoch as u64]).rng());
        let mut sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let parts: Vec<(f64, M)> = idx
                .par_iter()
                .map(|&i| {
                    let mut g = zeros_like(model);
                    item(model, i, &mut g).map(|l| (l, g))
                })
                .collect::<Result<_>>()?;
            let mut grad = zeros_like(model);
            let mut loss = 0.0;
            for (l, g) in &parts {
                loss += l;
                accumulate(&mut grad, g);
            }
            scale(&mut grad, 1.0 / idx.len() as f64);
            if !loss.is_finite() {
                return Err(Error::NonfiniteLoss(format!("fine-tuning epoch {epoch}")));
            }
            adam.step_module(model, &grad, &cfg.adam, &trainable)?;
            sum += loss;
        }
        let train_loss = sum / n_train as f64;
        let val_loss = val(model)?;
        let score = val_loss.unwrap_or(train_loss);
        log::info!("finetune epoch {epoch}: loss {train_loss:.5}, val {val_loss:?}");
        epochs.push(EpochRecord {
            epoch,
            loss: train_loss,
            val_loss,
            embedding_std: None,
        });
        match &best {
            Some((b, _, _)) if score >= *b => {}
            _ => best = Some((score, epoch, model.clone())),
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.1);
        if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    let (_, best_epoch, weights) = best.expect("at least one epoch");
    *model = weights;
    Ok(FitReport { epochs, best_epoch })
}

/// Inputs of the first trainable encoder layer, cached or recomputed.
struct ActivationCache<'a> {
    encoder: &'a Encoder,
    start: usize,
    data: Vec<Vec<f64>>,
    /// `data` holds raw encoder inputs and the prefix is recomputed per use.
    raw: bool,
}

impl<'a> ActivationCache<'a> {
    fn build(encoder: &'a Encoder, start: usize, inputs: Vec<Vec<f64>>) -> Result<Self> {
        let n = encoder.n_layers();
        let bytes = inputs.len() * encoder.activation_len(start.min(n - 1)) * 8;
        if start == 0 || (start < n && bytes > ACTIVATION_CACHE_BYTES) {
            return Ok(Self {
                encoder,
                start,
                data: inputs,
                raw: true,
            });
        }
        let data = inputs
            .par_iter()
            .map(|x| if start == n { encoder.embed(x) } else { encoder.prefix(x, start) })
            .collect::<Result<_>>()?;
        Ok(Self {
            encoder,
            start,
            data,
            raw: false,
        })
    }

    fn get(&self, i: usize) -> Result<std::borrow::Cow<'_, [f64]>> {
        if self.raw && self.start > 0 {
            Ok(self.encoder.prefix(&self.data[i], self.start)?.into())
        } else {
            Ok(self.data[i].as_slice().into())
        }
    }
}

/// Loss of one example through layers `start..` and the head; gradients go
/// into `grad` when given.
fn example(net: &HarNet, start: usize, x: &[f64], label: usize, grad: Option<&mut HarNet>) -> Result<f64> {
    let n = net.encoder.n_layers();
    let (e, trace) = if start >= n {
        (x.to_vec(), None)
    } else {
        let (e, t) = net.encoder.forward_from(start, x)?;
        (e, Some(t))
    };
    let (logits, htrace) = net.head.forward(&e)?;
    let p = softmax(&logits);
    let loss = cross_entropy(&p, label)?;
    if let Some(g) = grad {
        let mut d = p;
        d[label] -= 1.0;
        let d_e = net.head.backward(&htrace, &d, &mut g.head, trace.is_some());
        if let (Some(t), Some(d_e)) = (trace, d_e) {
            net.encoder.backward(&t, &d_e, &mut g.encoder, start);
        }
    }
    Ok(loss)
}

/// Restore the encoder of a pretraining or HAR checkpoint.
pub fn load_encoder(ck: &ModelCheckpoint) -> Result<Encoder> {
    let mut encoder = Encoder::standard(checkpoint_stream(&ck.manifest.architecture)?);
    ck.restore_into("encoder", &mut encoder)?;
    Ok(encoder)
}

/// Train a fresh HAR head on a pretrained encoder.
///
/// Encoder layers below the trainable set stay bit-identical. The returned
/// weights are those of the epoch with the lowest validation loss.
pub fn finetune(
    ck: &ModelCheckpoint,
    train: &[&SignalWindow],
    val: &[&SignalWindow],
    labels: &LabelMap,
    cfg: &FinetuneConfig,
    audit: Option<&SplitAudit>,
) -> Result<(HarModel, FitReport)> {
    cfg.validate()?;
    let stream = checkpoint_stream(&ck.manifest.architecture)?;
    let mut encoder = if cfg.fully_supervised {
        let mut e = Encoder::standard(stream);
        e.init(&RngStream::new(cfg.seed, 0x5E));
        e
    } else {
        load_encoder(ck)?
    };
    encoder.set_precision(cfg.precision);
    let mut head = Mlp::har(labels.len());
    head.init(&RngStream::new(cfg.seed, 0x4EAD));
    let grid = ck.manifest.scale_grid.clone();
    let net = HarNet { encoder, head };
    let mut model = HarModel::new(net, labels.labels().to_vec(), grid)?;
    let report = train_har(&mut model, train, val, cfg, audit)?;
    Ok((model, report))
}

fn train_har(
    model: &mut HarModel,
    train: &[&SignalWindow],
    val: &[&SignalWindow],
    cfg: &FinetuneConfig,
    audit: Option<&SplitAudit>,
) -> Result<FitReport> {
    if train.is_empty() {
        return Err(Error::InsufficientData("no training windows".into()));
    }
    let classes = model.classes();
    let y_train = labels_of(train, classes, audit)?;
    let y_val = labels_of(val, classes, audit)?;
    let n = model.net.encoder.n_layers();
    let start = if cfg.fully_supervised {
        0
    } else if cfg.unfreeze_last_conv {
        n - 1
    } else {
        n
    };
    let featurizer = model.featurizer.clone();
    let frozen = model.net.encoder.clone();
    let train_cache = ActivationCache::build(&frozen, start, featurizer.inputs(train)?)?;
    let val_cache = ActivationCache::build(&frozen, start, featurizer.inputs(val)?)?;
    let trainable = |name: &str| {
        name.starts_with("head.") || (0..n).skip(start).any(|l| name.starts_with(&format!("encoder.conv{}.", l + 1)))
    };
    let item = |net: &HarNet, i: usize, g: &mut HarNet| example(net, start, &train_cache.get(i)?, y_train[i], Some(g));
    let val_loss = |net: &HarNet| -> Result<Option<f64>> {
        if y_val.is_empty() {
            return Ok(None);
        }
        let losses: Vec<f64> = (0..y_val.len())
            .into_par_iter()
            .map(|i| example(net, start, &val_cache.get(i)?, y_val[i], None))
            .collect::<Result<_>>()?;
        Ok(Some(losses.iter().sum::<f64>() / losses.len() as f64))
    };
    fit(&mut model.net, train.len(), item, val_loss, cfg, trainable)
}

/// Two frozen encoders feeding a concatenation head.
#[derive(Debug, Clone)]
pub struct FusionModel {
    pub signal: HarModel,
    pub scalogram: HarModel,
    pub head: Mlp,
}

impl FusionModel {
    pub fn labels(&self) -> &[String] {
        &self.signal.labels
    }

    pub fn predict_scores(&self, w: &SignalWindow) -> Result<Vec<f64>> {
        fuse_features(&self.signal.embed(w)?, &self.scalogram.embed(w)?, &self.head)
    }

    pub fn predict_batch(&self, ws: &[&SignalWindow]) -> Result<Vec<Vec<f64>>> {
        ws.par_iter().map(|w| self.predict_scores(w)).collect()
    }
}

/// Train the feature-level fusion head with both encoders frozen.
pub fn train_fusion_head(
    signal: &HarModel,
    scalogram: &HarModel,
    train: &[&SignalWindow],
    val: &[&SignalWindow],
    cfg: &FinetuneConfig,
    audit: Option<&SplitAudit>,
) -> Result<(FusionModel, FitReport)> {
    cfg.validate()?;
    if signal.stream() != Stream::Signal || scalogram.stream() != Stream::Scalogram {
        return Err(Error::InvalidParams("fusion needs one signal and one scalogram model".into()));
    }
    if signal.labels != scalogram.labels {
        return Err(Error::InvalidParams("fused models disagree on labels".into()));
    }
    if train.is_empty() {
        return Err(Error::InsufficientData("no training windows".into()));
    }
    let classes = signal.classes();
    let y_train = labels_of(train, classes, audit)?;
    let y_val = labels_of(val, classes, audit)?;
    let features = |ws: &[&SignalWindow]| -> Result<Vec<Vec<f64>>> {
        let a = signal.embed_batch(ws)?;
        let b = scalogram.embed_batch(ws)?;
        Ok(a.into_iter().zip(b).map(|(a, b)| [a, b].concat()).collect())
    };
    let x_train = features(train)?;
    let x_val = features(val)?;
    let mut head = Mlp::fusion(classes);
    head.init(&RngStream::new(cfg.seed, 0xF05E));
    let loss_of = |head: &Mlp, x: &[f64], label: usize, grad: Option<&mut Mlp>| -> Result<f64> {
        let (logits, trace) = head.forward(x)?;
        let p = softmax(&logits);
        let loss = cross_entropy(&p, label)?;
        if let Some(g) = grad {
            let mut d = p;
            d[label] -= 1.0;
            head.backward(&trace, &d, g, false);
        }
        Ok(loss)
    };
    let item = |h: &Mlp, i: usize, g: &mut Mlp| loss_of(h, &x_train[i], y_train[i], Some(g));
    let val_loss = |h: &Mlp| -> Result<Option<f64>> {
        if y_val.is_empty() {
            return Ok(None);
        }
        let total = x_val
            .iter()
            .zip(&y_val)
            .map(|(x, &y)| loss_of(h, x, y, None))
            .sum::<Result<f64>>()?;
        Ok(Some(total / y_val.len() as f64))
    };
    let report = fit(&mut head, train.len(), item, val_loss, cfg, |_| true)?;
    Ok((
        FusionModel {
            signal: signal.clone(),
            scalogram: scalogram.clone(),
            head,
        },
        report,
    ))
}
