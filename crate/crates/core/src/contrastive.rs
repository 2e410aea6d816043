//! Contrastive objectives and the self-supervised pretraining loop.
//!
//! Latent batches are 0-based: rows `2k` and `2k + 1` are the two views of
//! sample `k`, so the positive partner of row `i` is `i ^ 1`.

use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{make_views, Pipeline, TemporalSpec, TimeFreqSpec};
use crate::dataio::{SignalWindow, SplitAudit};
use crate::error::{Error, Result};
use crate::nn::{
    accumulate, zeros_like, AdamConfig, ConvLayer, AdamState, EncoderTrace, EpochRecord, Mlp, MlpTrace, ModelCheckpoint, Module,
    ParamKind, Precision, ScalogramEncoder, SignalEncoder, Tensor,
};
use crate::rng::RngStream;
use crate::wavelet::{Scalogram, ScaleGrid, ScalogramMaker};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Signal,
    Scalogram,
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stream::Signal => "signal",
            Stream::Scalogram => "scalogram",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    #[default]
    Ntxent,
    Stopgrad,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Ntxent => "ntxent",
            Objective::Stopgrad => "stopgrad",
        })
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(v: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = norm(v);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok((v.iter().map(|x| x / n).collect(), n))
}

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::LengthMismatch(u.len(), v.len()));
    }
    let (nu, nv) = (norm(u), norm(v));
    if !(nu > 0.0 && nv > 0.0) {
        return Err(Error::ZeroVector);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// `2N` latent rows plus the temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    pub z: Vec<Vec<f64>>,
    pub tau: f64,
}

impl LatentBatch {
    pub fn new(z: Vec<Vec<f64>>, tau: f64) -> Result<Self> {
        if z.len() < 2 || z.len() % 2 != 0 {
            return Err(Error::bad_shape("an even number (>= 2) of rows", z.len()));
        }
        let d = z[0].len();
        if z.iter().any(|r| r.len() != d) {
            return Err(Error::bad_shape(format!("rows of length {d}"), "ragged rows"));
        }
        if z.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonfiniteLoss("latent batch holds non-finite values".into()));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidParams(format!("temperature must be positive, got {tau}")));
        }
        Ok(Self { z, tau })
    }

    pub fn rows(&self) -> usize {
        self.z.len()
    }

    fn similarities(&self) -> Result<(Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>)> {
        let mut u = Vec::with_capacity(self.rows());
        let mut norms = Vec::with_capacity(self.rows());
        for r in &self.z {
            let (v, n) = unit(r)?;
            u.push(v);
            norms.push(n);
        }
        let s = u
            .iter()
            .map(|a| u.iter().map(|b| dot(a, b) / self.tau).collect())
            .collect();
        Ok((u, norms, s))
    }
}

/// `log Σ_{k≠i} exp(s_ik)` computed stably.
fn log_denominator(s: &[f64], i: usize) -> f64 {
    let m = s
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != i)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = s
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != i)
        .map(|(_, &v)| (v - m).exp())
        .sum();
    m + sum.ln()
}

/// `ℓ(i, j) = −log( exp(s_ij) / Σ_{k≠i} exp(s_ik) )` with `s_ik = sim(z_i, z_k) / τ`.
pub fn ntxent_pair_loss(i: usize, j: usize, b: &LatentBatch) -> Result<f64> {
    if i >= b.rows() || j >= b.rows() || i == j {
        return Err(Error::InvalidParams(format!("invalid pair ({i}, {j}) for {} rows", b.rows())));
    }
    let (_, _, s) = b.similarities()?;
    Ok((log_denominator(&s[i], i) - s[i][j]).max(0.0))
}

/// Mean of `ℓ(i, i^1)` over all `2N` rows.
pub fn ntxent_batch_loss(b: &LatentBatch) -> Result<f64> {
    Ok(ntxent_loss_grad(b)?.0)
}

/// Batch loss and its gradient with respect to every latent row.
pub fn ntxent_loss_grad(b: &LatentBatch) -> Result<(f64, Vec<Vec<f64>>)> {
    let n2 = b.rows();
    let d = b.z[0].len();
    let (u, norms, s) = b.similarities()?;
    let mut du = vec![vec![0.0; d]; n2];
    let mut loss = 0.0;
    for i in 0..n2 {
        let pos = i ^ 1;
        let lse = log_denominator(&s[i], i);
        loss += lse - s[i][pos];
        for k in 0..n2 {
            if k == i {
                continue;
            }
            let mut g = (s[i][k] - lse).exp();
            if k == pos {
                g -= 1.0;
            }
            let g = g / (n2 as f64 * b.tau);
            for c in 0..d {
                du[i][c] += g * u[k][c];
                du[k][c] += g * u[i][c];
            }
        }
    }
    let grads = (0..n2)
        .map(|i| {
            let proj = dot(&u[i], &du[i]);
            (0..d).map(|c| (du[i][c] - u[i][c] * proj) / norms[i]).collect()
        })
        .collect();
    Ok(((loss / n2 as f64).max(0.0), grads))
}

/// Value and gradients of the stop-gradient objective.
#[derive(Debug, Clone, PartialEq)]
pub struct StopGradOutput {
    pub loss: f64,
    pub d_p1: Vec<f64>,
    pub d_p2: Vec<f64>,
    /// Gradients with respect to the detached targets; always zero.
    pub d_z1: Vec<f64>,
    pub d_z2: Vec<f64>,
}

/// `∂(−cos(p, z)) / ∂p`.
fn neg_cos_grad(p: &[f64], z: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (pu, pn) = unit(p)?;
    let (zu, _) = unit(z)?;
    let c = dot(&pu, &zu);
    Ok((-c, pu.iter().zip(&zu).map(|(a, b)| -(b - a * c) / pn).collect()))
}

/// `½ (D(p1, sg(z2)) + D(p2, sg(z1)))` with `D` the negative cosine similarity.
pub fn stopgrad_loss(z1: &[f64], z2: &[f64], p1: &[f64], p2: &[f64]) -> Result<f64> {
    Ok(stopgrad_loss_grad(z1, z2, p1, p2)?.loss)
}

pub fn stopgrad_loss_grad(z1: &[f64], z2: &[f64], p1: &[f64], p2: &[f64]) -> Result<StopGradOutput> {
    for (a, b) in [(p1, z2), (p2, z1)] {
        if a.len() != b.len() {
            return Err(Error::LengthMismatch(a.len(), b.len()));
        }
    }
    let (l1, g1) = neg_cos_grad(p1, z2)?;
    let (l2, g2) = neg_cos_grad(p2, z1)?;
    Ok(StopGradOutput {
        loss: 0.5 * (l1 + l2),
        d_p1: g1.into_iter().map(|g| 0.5 * g).collect(),
        d_p2: g2.into_iter().map(|g| 0.5 * g).collect(),
        d_z1: vec![0.0; z1.len()],
        d_z2: vec![0.0; z2.len()],
    })
}

/// Either encoder behind one interface.
#[derive(Debug, Clone, PartialEq)]
pub enum Encoder {
    Signal(SignalEncoder),
    Scalogram(ScalogramEncoder),
}

macro_rules! each_encoder {
    ($self:expr, $e:ident => $body:expr) => {
        match $self {
            Encoder::Signal($e) => $body,
            Encoder::Scalogram($e) => $body,
        }
    };
}

impl Encoder {
    pub fn standard(stream: Stream) -> Self {
        match stream {
            Stream::Signal => Encoder::Signal(SignalEncoder::standard()),
            Stream::Scalogram => Encoder::Scalogram(ScalogramEncoder::standard()),
        }
    }

    pub fn stream(&self) -> Stream {
        match self {
            Encoder::Signal(_) => Stream::Signal,
            Encoder::Scalogram(_) => Stream::Scalogram,
        }
    }

    pub fn n_layers(&self) -> usize {
        each_encoder!(self, e => e.layers.len())
    }

    pub fn embed_dim(&self) -> usize {
        each_encoder!(self, e => e.embed_dim())
    }

    pub fn set_precision(&mut self, p: Precision) {
        each_encoder!(self, e => e.precision = p)
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, EncoderTrace)> {
        each_encoder!(self, e => e.forward(x))
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        each_encoder!(self, e => e.embed(x))
    }

    pub fn prefix(&self, x: &[f64], upto: usize) -> Result<Vec<f64>> {
        each_encoder!(self, e => e.prefix(x, upto))
    }

    pub fn forward_from(&self, start: usize, x: &[f64]) -> Result<(Vec<f64>, EncoderTrace)> {
        each_encoder!(self, e => e.forward_from(start, x))
    }

    /// Number of values in the activation feeding layer `l`.
    pub fn activation_len(&self, l: usize) -> usize {
        each_encoder!(self, e => {
            if l == 0 {
                e.input_len()
            } else {
                e.layer_dims()[l - 1].iter().product::<usize>() * e.layers[l - 1].out_channels()
            }
        })
    }

    /// `grad` must be the same variant as `self`.
    pub fn backward(&self, trace: &EncoderTrace, d_embed: &[f64], grad: &mut Encoder, trainable_from: usize) {
        match (self, grad) {
            (Encoder::Signal(e), Encoder::Signal(g)) => e.backward(trace, d_embed, g, trainable_from),
            (Encoder::Scalogram(e), Encoder::Scalogram(g)) => e.backward(trace, d_embed, g, trainable_from),
            _ => panic!("encoder and gradient buffer differ in kind"),
        }
    }
}

impl Module for Encoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        each_encoder!(self, e => e.visit(prefix, f))
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        each_encoder!(self, e => e.visit_mut(prefix, f))
    }
}

/// Turns windows into encoder inputs for one stream.
#[derive(Debug, Clone)]
pub enum Featurizer {
    Signal,
    Scalogram(ScalogramMaker),
}

impl Featurizer {
    pub fn new(stream: Stream, grid: &ScaleGrid) -> Result<Self> {
        Ok(match stream {
            Stream::Signal => Featurizer::Signal,
            Stream::Scalogram => Featurizer::Scalogram(ScalogramMaker::new(grid)?),
        })
    }

    pub fn input(&self, w: &SignalWindow) -> Result<Vec<f64>> {
        match self {
            Featurizer::Signal => {
                w.check_shape(crate::dataio::WINDOW_LEN)?;
                Ok(w.values.clone())
            }
            Featurizer::Scalogram(m) => Ok(m.make(w)?.pixels),
        }
    }

    /// Order-stable parallel conversion.
    pub fn inputs(&self, windows: &[&SignalWindow]) -> Result<Vec<Vec<f64>>> {
        windows.par_iter().map(|w| self.input(w)).collect()
    }
}

/// Encoder, projection head and, for the stop-gradient objective, a predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainModel {
    pub encoder: Encoder,
    pub projection: Mlp,
    pub predictor: Option<Mlp>,
}

impl Module for PretrainModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        self.encoder.visit(&crate::nn::join(prefix, "encoder"), f);
        self.projection.visit(&crate::nn::join(prefix, "projection"), f);
        if let Some(p) = &self.predictor {
            p.visit(&crate::nn::join(prefix, "predictor"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        self.encoder.visit_mut(&crate::nn::join(prefix, "encoder"), f);
        self.projection.visit_mut(&crate::nn::join(prefix, "projection"), f);
        if let Some(p) = &mut self.predictor {
            p.visit_mut(&crate::nn::join(prefix, "predictor"), f);
        }
    }
}

/// Loss, gradient and collapse statistic of one batch.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub loss: f64,
    pub grad: PretrainModel,
    /// Mean over dimensions of the standard deviation of L2-normalized
    /// encoder embeddings.
    pub embedding_std: f64,
}

struct ViewPass {
    etrace: EncoderTrace,
    ptrace: MlpTrace,
    z: Vec<f64>,
    pred: Option<(Vec<f64>, MlpTrace)>,
}

pub fn architecture_id(stream: Stream, objective: Objective) -> String {
    format!("pretrain:{stream}:{objective}")
}

pub fn parse_architecture_id(id: &str) -> Result<(Stream, Objective)> {
    let parts: Vec<&str> = id.split(':').collect();
    let bad = || Error::UnknownArch(id.to_string());
    if parts.len() != 3 || parts[0] != "pretrain" {
        return Err(bad());
    }
    let stream = match parts[1] {
        "signal" => Stream::Signal,
        "scalogram" => Stream::Scalogram,
        _ => return Err(bad()),
    };
    let objective = match parts[2] {
        "ntxent" => Objective::Ntxent,
        "stopgrad" => Objective::Stopgrad,
        _ => return Err(bad()),
    };
    Ok((stream, objective))
}

impl PretrainModel {
    pub fn from_parts(encoder: Encoder, objective: Objective) -> Self {
        let d = encoder.embed_dim();
        Self {
            encoder,
            projection: Mlp::new(d, d, d),
            predictor: (objective == Objective::Stopgrad).then(|| Mlp::new(d, d, d)),
        }
    }

    /// Standard-sized model, Glorot-initialized from `seed`.
    pub fn new(stream: Stream, objective: Objective, seed: u64) -> Self {
        let mut m = Self::from_parts(Encoder::standard(stream), objective);
        m.init(&RngStream::new(seed, 0x97E7));
        m
    }

    pub fn objective(&self) -> Objective {
        if self.predictor.is_some() {
            Objective::Stopgrad
        } else {
            Objective::Ntxent
        }
    }

    pub fn to_checkpoint(&self, seed: u64) -> ModelCheckpoint {
        let mut ck = ModelCheckpoint::new(architecture_id(self.encoder.stream(), self.objective()), seed);
        ck.push_module("", self);
        ck
    }

    pub fn from_checkpoint(ck: &ModelCheckpoint) -> Result<Self> {
        let (stream, objective) = parse_architecture_id(&ck.manifest.architecture)?;
        let mut m = Self::from_parts(Encoder::standard(stream), objective);
        ck.restore_into("", &mut m)?;
        Ok(m)
    }

    fn view_forward(&self, x: &[f64]) -> Result<ViewPass> {
        let (e, etrace) = self.encoder.forward(x)?;
        let (z, ptrace) = self.projection.forward(&e)?;
        let pred = match &self.predictor {
            Some(q) => Some(q.forward(&z)?),
            None => None,
        };
        Ok(ViewPass { etrace, ptrace, z, pred })
    }

    fn view_backward(&self, pass: &ViewPass, d_z: Vec<f64>, grad: &mut PretrainModel) {
        let d_e = self
            .projection
            .backward(&pass.ptrace, &d_z, &mut grad.projection, true)
            .expect("input gradient requested");
        self.encoder.backward(&pass.etrace, &d_e, &mut grad.encoder, 0);
    }

    /// Pretext loss over `N` view pairs and its gradient for every parameter.
    ///
    /// Per-item work may run in parallel; gradients are summed in item order.
    pub fn batch_loss(&self, views: &[(Vec<f64>, Vec<f64>)], tau: f64) -> Result<BatchOutput> {
        self.batch_loss_with_targets(views, tau, None)
    }

    /// Projection outputs `(z1, z2)` of every pair, the stop-gradient targets.
    pub fn latents(&self, views: &[(Vec<f64>, Vec<f64>)]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        views
            .par_iter()
            .map(|(a, b)| {
                let za = self.projection.forward(&self.encoder.embed(a)?)?.0;
                let zb = self.projection.forward(&self.encoder.embed(b)?)?.0;
                Ok((za, zb))
            })
            .collect()
    }

    /// As [`batch_loss`](Self::batch_loss), but the stop-gradient objective
    /// reads its targets from `targets` when given. Holding the targets fixed
    /// makes the stop-gradient loss an ordinary function of the parameters,
    /// which is what finite differences need.
    pub fn batch_loss_with_targets(
        &self,
        views: &[(Vec<f64>, Vec<f64>)],
        tau: f64,
        targets: Option<&[(Vec<f64>, Vec<f64>)]>,
    ) -> Result<BatchOutput> {
        if targets.is_some_and(|t| t.len() != views.len()) {
            return Err(Error::LengthMismatch(views.len(), targets.map_or(0, <[_]>::len)));
        }
        if views.is_empty() {
            return Err(Error::InsufficientData("empty batch".into()));
        }
        let passes: Vec<(ViewPass, ViewPass)> = views
            .par_iter()
            .map(|(a, b)| Ok((self.view_forward(a)?, self.view_forward(b)?)))
            .collect::<Result<_>>()?;
        let n = passes.len() as f64;
        let embedding_std = spread(passes.iter().flat_map(|(a, b)| [&a.etrace.pooled, &b.etrace.pooled]));

        // Upstream gradients per item: (d_z1, d_z2) at the projection output,
        // or (d_p1, d_p2) at the predictor output.
        let (loss, upstream): (f64, Vec<(Vec<f64>, Vec<f64>)>) = match self.objective() {
            Objective::Ntxent => {
                let z: Vec<Vec<f64>> = passes.iter().flat_map(|(a, b)| [a.z.clone(), b.z.clone()]).collect();
                let (loss, mut dz) = ntxent_loss_grad(&LatentBatch::new(z, tau)?)?;
                let pairs = dz
                    .chunks_exact_mut(2)
                    .map(|c| (std::mem::take(&mut c[0]), std::mem::take(&mut c[1])))
                    .collect();
                (loss, pairs)
            }
            Objective::Stopgrad => {
                let mut total = 0.0;
                let mut pairs = Vec::with_capacity(passes.len());
                for (k, (a, b)) in passes.iter().enumerate() {
                    let (p1, p2) = (&a.pred.as_ref().expect("predictor").0, &b.pred.as_ref().expect("predictor").0);
                    let (z1, z2) = match targets {
                        Some(t) => (&t[k].0, &t[k].1),
                        None => (&a.z, &b.z),
                    };
                    let out = stopgrad_loss_grad(z1, z2, p1, p2)?;
                    total += out.loss;
                    let s = |v: Vec<f64>| v.into_iter().map(|g| g / n).collect::<Vec<f64>>();
                    pairs.push((s(out.d_p1), s(out.d_p2)));
                }
                (total / n, pairs)
            }
        };
        if !loss.is_finite() {
            return Err(Error::NonfiniteLoss(format!("batch loss is {loss}")));
        }

        let grads: Vec<PretrainModel> = passes
            .par_iter()
            .zip(upstream.into_par_iter())
            .map(|((a, b), (ga, gb))| {
                let mut g = zeros_like(self);
                for (pass, up) in [(a, ga), (b, gb)] {
                    let d_z = match (&self.predictor, &pass.pred) {
                        (Some(q), Some((_, qtrace))) => q
                            .backward(qtrace, &up, g.predictor.as_mut().expect("predictor grad"), true)
                            .expect("input gradient requested"),
                        _ => up,
                    };
                    self.view_backward(pass, d_z, &mut g);
                }
                g
            })
            .collect();
        let mut grad = zeros_like(self);
        for g in &grads {
            accumulate(&mut grad, g);
        }
        Ok(BatchOutput {
            loss,
            grad,
            embedding_std,
        })
    }
}

fn spread<'a>(rows: impl Iterator<Item = &'a Vec<f64>>) -> f64 {
    let units: Vec<Vec<f64>> = rows.filter_map(|r| unit(r).ok().map(|(u, _)| u)).collect();
    if units.len() < 2 {
        return 0.0;
    }
    let d = units[0].len();
    let n = units.len() as f64;
    (0..d)
        .map(|c| {
            let mean = units.iter().map(|u| u[c]).sum::<f64>() / n;
            (units.iter().map(|u| (u[c] - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .sum::<f64>()
        / d as f64
}

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub stream: Stream,
    pub objective: Objective,
    pub batch_size: usize,
    pub epochs: usize,
    pub tau: f64,
    pub adam: AdamConfig,
    pub temporal: Pipeline<TemporalSpec>,
    pub timefreq: Pipeline<TimeFreqSpec>,
    /// Scale grid of the scalogram stream.
    pub scale_grid: ScaleGrid,
    pub precision: Precision,
    pub seed: u64,
    /// Line-delimited JSON record per epoch.
    pub metrics_log: Option<PathBuf>,
}

impl PretrainConfig {
    /// Batch 128, τ 0.5, 150 epochs for the signal stream and 50 for the
    /// scalogram stream, every default transform at probability 0.5.
    pub fn new(stream: Stream, scale_grid: ScaleGrid, seed: u64) -> Self {
        Self {
            stream,
            objective: Objective::Ntxent,
            batch_size: 128,
            epochs: match stream {
                Stream::Signal => 150,
                Stream::Scalogram => 50,
            },
            tau: 0.5,
            adam: AdamConfig::default(),
            temporal: Pipeline::composed(
                TemporalSpec::all_defaults()
                    .into_iter()
                    .map(|transform| crate::augment::Step { transform, p: 0.5 })
                    .collect(),
            ),
            timefreq: Pipeline::composed(
                TimeFreqSpec::all_defaults()
                    .into_iter()
                    .map(|transform| crate::augment::Step { transform, p: 0.5 })
                    .collect(),
            ),
            scale_grid,
            precision: Precision::Double,
            seed,
            metrics_log: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidParams(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidParams("epochs must be at least 1".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidParams(format!("tau must be positive, got {}", self.tau)));
        }
        let empty = match self.stream {
            Stream::Signal => self.temporal.steps.is_empty(),
            Stream::Scalogram => self.timefreq.steps.is_empty(),
        };
        if empty {
            return Err(Error::EmptyPipeline);
        }
        Ok(())
    }

    pub fn hyperparameters(&self) -> serde_json::Value {
        serde_json::json!({
            "stream": self.stream,
            "objective": self.objective,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "tau": self.tau,
            "adam": self.adam,
            "precision": self.precision,
        })
    }
}

enum ViewSource<'a> {
    Signal(&'a [&'a SignalWindow], &'a Pipeline<TemporalSpec>),
    Scalogram(Vec<Scalogram>, &'a Pipeline<TimeFreqSpec>),
}

impl ViewSource<'_> {
    fn views(&self, i: usize, rng: &RngStream) -> Result<(Vec<f64>, Vec<f64>)> {
        match self {
            ViewSource::Signal(ws, p) => {
                let (a, b) = make_views(ws[i], p, rng)?;
                Ok((a.values, b.values))
            }
            ViewSource::Scalogram(ss, p) => {
                let (a, b) = make_views(&ss[i], p, rng)?;
                Ok((a.pixels, b.pixels))
            }
        }
    }
}

/// Self-supervised training of encoder and projection head on unlabeled windows.
///
/// Each epoch shuffles the windows, drops the last incomplete batch and takes
/// one Adam step per batch. The returned checkpoint holds the per-step loss
/// curve and per-epoch records. When `audit` is given every batch is checked
/// against it before use.
pub fn pretrain(cfg: &PretrainConfig, windows: &[&SignalWindow], audit: Option<&SplitAudit>) -> Result<ModelCheckpoint> {
    cfg.validate()?;
    if windows.len() < cfg.batch_size {
        return Err(Error::InsufficientData(format!(
            "{} windows for batch size {}",
            windows.len(),
            cfg.batch_size
        )));
    }
    let root = RngStream::new(cfg.seed, 0xC0);
    let source = match cfg.stream {
        Stream::Signal => ViewSource::Signal(windows, &cfg.temporal),
        Stream::Scalogram => ViewSource::Scalogram(ScalogramMaker::new(&cfg.scale_grid)?.make_batch(windows)?, &cfg.timefreq),
    };
    let mut model = PretrainModel::new(cfg.stream, cfg.objective, cfg.seed);
    model.encoder.set_precision(cfg.precision);
    let mut adam = AdamState::default();
    let mut log = match &cfg.metrics_log {
        Some(p) => Some(File::create(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };

    let mut loss_curve = Vec::new();
    let mut epochs = Vec::new();
    let batches = windows.len() / cfg.batch_size;
    let mut order: Vec<usize> = (0..windows.len()).collect();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut root.derive(&[1, epoch as u64]).rng());
        let (mut sum, mut std_sum) = (0.0, 0.0);
        for b in 0..batches {
            let idx = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            if let Some(a) = audit {
                idx.iter().try_for_each(|&i| a.check(windows[i]))?;
            }
            let views: Vec<(Vec<f64>, Vec<f64>)> = idx
                .par_iter()
                .map(|&i| source.views(i, &root.derive(&[2, epoch as u64, i as u64])))
                .collect::<Result<_>>()?;
            let out = model.batch_loss(&views, cfg.tau).map_err(|e| match e {
                Error::NonfiniteLoss(m) => Error::NonfiniteLoss(format!("epoch {epoch}, batch {b}: {m}")),
                other => other,
            })?;
            adam.step_module(&mut model, &out.grad, &cfg.adam, |_| true)?;
            if model.flatten().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonfiniteLoss(format!("epoch {epoch}, batch {b}: parameters diverged")));
            }
            loss_curve.push(out.loss);
            sum += out.loss;
            std_sum += out.embedding_std;
        }
        let record = EpochRecord {
            epoch,
            loss: sum / batches as f64,
            val_loss: None,
            embedding_std: Some(std_sum / batches as f64),
        };
        let wall = start.elapsed().as_secs_f64();
        log::info!(
            "pretrain {} epoch {epoch}: loss {:.5}, latent std {:.4}, {wall:.1}s",
            cfg.stream,
            record.loss,
            std_sum / batches as f64
        );
        if let (Some(f), Some(p)) = (log.as_mut(), cfg.metrics_log.as_ref()) {
            let line = serde_json::json!({
                "epoch": epoch,
                "loss": record.loss,
                "embedding_std": record.embedding_std,
                "wall_time_s": wall,
            });
            writeln!(f, "{line}").map_err(|e| Error::io(p, e))?;
        }
        epochs.push(record);
    }

    let mut ck = model.to_checkpoint(cfg.seed);
    ck.manifest.hyperparameters = cfg.hyperparameters();
    ck.manifest.loss_curve = loss_curve;
    ck.manifest.epochs = epochs;
    if cfg.stream == Stream::Scalogram {
        ck.manifest.scale_grid = Some(cfg.scale_grid.clone());
    }
    Ok(ck)
}
