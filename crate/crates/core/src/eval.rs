//! Classification metrics, the cross-validation driver, the cross-corpus
//! transfer protocol and embedding export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, FusionMode};
use crate::contrastive::{architecture_id, pretrain, Encoder, Featurizer, Stream};
use crate::dataio::{Fold, LabelMap, Scheme, SignalWindow, SplitAudit, SplitPlan, Windowed};
use crate::downstream::{argmax, finetune, fuse_scores_weighted, train_fusion_head, HarModel};
use crate::error::{Error, Result};
use crate::nn::ModelCheckpoint;
use crate::rng::RngStream;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn row(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    fn col(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    fn diagonal(&self) -> u64 {
        (0..self.classes()).map(|c| self.counts[c][c]).sum()
    }

    pub fn accuracy(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::EmptyMatrix),
            n => Ok(self.diagonal() as f64 / n as f64),
        }
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch(preds.len(), labels.len()));
    }
    let mut m = ConfusionMatrix::zeros(classes);
    for (&p, &t) in preds.iter().zip(labels) {
        if let Some(&index) = [p, t].iter().find(|&&i| i >= classes) {
            return Err(Error::IndexOutOfRange { index, classes });
        }
        m.counts[t][p] += 1;
    }
    Ok(m)
}

/// Support-weighted mean of per-class F1; a class with no predictions and
/// no support scores 0.
pub fn weighted_f1(m: &ConfusionMatrix) -> Result<f64> {
    let n = m.total();
    if n == 0 {
        return Err(Error::EmptyMatrix);
    }
    let mut acc = 0.0;
    for c in 0..m.classes() {
        let support = m.row(c);
        if support == 0 {
            continue;
        }
        let f1 = 2.0 * m.counts[c][c] as f64 / (support + m.col(c)) as f64;
        acc += support as f64 * f1;
    }
    Ok(acc / n as f64)
}

/// Chance-corrected agreement, evaluated in exact integer arithmetic up to
/// the final division.
pub fn cohen_kappa(m: &ConfusionMatrix) -> Result<f64> {
    let n = u128::from(m.total());
    if n == 0 {
        return Err(Error::EmptyMatrix);
    }
    let chance: u128 = (0..m.classes()).map(|c| u128::from(m.row(c)) * u128::from(m.col(c))).sum();
    let denom = n * n - chance;
    if denom == 0 {
        return Err(Error::Degenerate);
    }
    let num = (n * u128::from(m.diagonal())) as i128 - chance as i128;
    Ok(num as f64 / denom as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metrics {
    pub weighted_f1: f64,
    /// Absent when chance agreement is 1.
    pub kappa: Option<f64>,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

impl Metrics {
    pub fn from_scores(scores: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<Self> {
        let preds: Vec<usize> = scores.iter().map(|p| argmax(p)).collect();
        let m = confusion(&preds, labels, classes)?;
        Ok(Self {
            weighted_f1: weighted_f1(&m)?,
            kappa: match cohen_kappa(&m) {
                Ok(k) => Some(k),
                Err(Error::Degenerate) => None,
                Err(e) => return Err(e),
            },
            accuracy: m.accuracy()?,
            confusion: m,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scores {
    pub weighted_f1: f64,
    pub kappa: Option<f64>,
    pub accuracy: f64,
}

/// Mean and sample standard deviation over folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub mean: Scores,
    pub std: Scores,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl Summary {
    /// Kappa statistics use only folds where kappa is defined.
    pub fn of(folds: &[&Metrics]) -> Self {
        let f1: Vec<f64> = folds.iter().map(|m| m.weighted_f1).collect();
        let acc: Vec<f64> = folds.iter().map(|m| m.accuracy).collect();
        let kappa: Vec<f64> = folds.iter().filter_map(|m| m.kappa).collect();
        let (f1_m, f1_s) = mean_std(&f1);
        let (acc_m, acc_s) = mean_std(&acc);
        let (k_m, k_s) = if kappa.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&kappa);
            (Some(m), Some(s))
        };
        Self {
            mean: Scores {
                weighted_f1: f1_m,
                kappa: k_m,
                accuracy: acc_m,
            },
            std: Scores {
                weighted_f1: f1_s,
                kappa: k_s,
                accuracy: acc_s,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldReport {
    pub fold: usize,
    pub train_subjects: Vec<String>,
    pub val_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
    pub test_windows: usize,
    /// Metrics of the configured fusion mode.
    pub fused: Metrics,
    /// Single-stream metrics keyed by stream name.
    pub streams: BTreeMap<String, Metrics>,
    /// Weight digests of the pretrained encoders used, keyed by stream name.
    pub checkpoints: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aggregate {
    pub fused: Summary,
    pub streams: BTreeMap<String, Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub checkpoint_ids: Vec<String>,
    /// Pretraining on an external corpus.
    pub transfer: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub scheme: Scheme,
    pub fusion: FusionMode,
    pub labels: Vec<String>,
    pub folds: Vec<FoldReport>,
    pub aggregate: Aggregate,
    pub provenance: Provenance,
}

impl MetricsReport {
    pub fn assemble(exp: &ExperimentConfig, labels: &LabelMap, folds: Vec<FoldReport>, transfer: bool) -> Self {
        let fused: Vec<&Metrics> = folds.iter().map(|f| &f.fused).collect();
        let mut streams = BTreeMap::new();
        for name in folds.first().map(|f| f.streams.keys().cloned().collect::<Vec<_>>()).unwrap_or_default() {
            let per: Vec<&Metrics> = folds.iter().filter_map(|f| f.streams.get(&name)).collect();
            streams.insert(name, Summary::of(&per));
        }
        let mut ids: Vec<String> = folds.iter().flat_map(|f| f.checkpoints.values().cloned()).collect();
        ids.sort();
        ids.dedup();
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            scheme: exp.scheme,
            fusion: exp.fusion,
            labels: labels.labels().to_vec(),
            aggregate: Aggregate {
                fused: Summary::of(&fused),
                streams,
            },
            folds,
            provenance: Provenance {
                config_hash: exp.hash(),
                seed: exp.seed,
                checkpoint_ids: ids,
                transfer,
            },
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::InvalidParams(format!("unsupported report schema {}", r.schema_version)));
        }
        Ok(r)
    }

    /// Plain-text table of per-fold and aggregate scores.
    pub fn table(&self) -> String {
        let kappa = |k: Option<f64>| k.map_or("     -".to_string(), |k| format!("{k:6.3}"));
        let mut out = String::new();
        let mut names = vec!["fused".to_string()];
        names.extend(self.aggregate.streams.keys().cloned());
        let _ = writeln!(out, "{:<8} {:<10} {:>6} {:>6} {:>6}", "fold", "model", "F1", "kappa", "acc");
        for f in &self.folds {
            for name in &names {
                let m = if name == "fused" { &f.fused } else { &f.streams[name] };
                let _ = writeln!(
                    out,
                    "{:<8} {:<10} {:6.3} {} {:6.3}",
                    f.fold,
                    name,
                    m.weighted_f1,
                    kappa(m.kappa),
                    m.accuracy
                );
            }
        }
        for name in &names {
            let s = if name == "fused" { &self.aggregate.fused } else { &self.aggregate.streams[name] };
            let _ = writeln!(
                out,
                "{:<8} {:<10} {:6.3} {} {:6.3}   (std F1 {:.3})",
                "mean",
                name,
                s.mean.weighted_f1,
                kappa(s.mean.kappa),
                s.mean.accuracy,
                s.std.weighted_f1
            );
        }
        out
    }
}

/// Pretrained checkpoints reused by every fold.
#[derive(Debug, Clone, Default)]
pub struct SharedEncoders {
    pub signal: Option<ModelCheckpoint>,
    pub scalogram: Option<ModelCheckpoint>,
}

impl SharedEncoders {
    pub fn get(&self, stream: Stream) -> Option<&ModelCheckpoint> {
        match stream {
            Stream::Signal => self.signal.as_ref(),
            Stream::Scalogram => self.scalogram.as_ref(),
        }
    }

    fn set(&mut self, stream: Stream, ck: ModelCheckpoint) {
        match stream {
            Stream::Signal => self.signal = Some(ck),
            Stream::Scalogram => self.scalogram = Some(ck),
        }
    }
}

/// Seed of fold `k`, derived from the experiment seed.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    RngStream::new(seed, 0xF0).derive(&[fold as u64]).rng().next_u64()
}

/// Pretrain the streams the fusion mode needs on `windows`, once.
pub fn pretrain_shared(exp: &ExperimentConfig, windows: &[&SignalWindow], seed: u64) -> Result<SharedEncoders> {
    let subjects: Vec<&str> = windows.iter().map(|w| w.subject.as_str()).collect();
    let audit = SplitAudit::new("shared pretraining", subjects);
    let mut shared = SharedEncoders::default();
    for &stream in exp.fusion.streams() {
        let cfg = exp.pretrain_config(stream, seed)?;
        shared.set(stream, pretrain(&cfg, windows, Some(&audit))?);
    }
    Ok(shared)
}

/// Everything one fold produced.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub report: FoldReport,
    pub models: Vec<HarModel>,
}

fn labels_of(ws: &[&SignalWindow]) -> Result<Vec<usize>> {
    ws.iter()
        .map(|w| {
            w.label
                .ok_or_else(|| Error::LabelsMissing(format!("test window of subject `{}` has no label", w.subject)))
        })
        .collect()
}

/// Pretrain (unless shared), fine-tune, fuse and score one fold.
pub fn run_fold(
    k: usize,
    fold: &Fold,
    data: &Windowed,
    exp: &ExperimentConfig,
    shared: Option<&SharedEncoders>,
) -> Result<FoldOutcome> {
    let seed = fold_seed(exp.seed, k);
    let train = Fold::select(&fold.train, &data.windows);
    let val = Fold::select(&fold.val, &data.windows);
    let test = Fold::select(&fold.test, &data.windows);
    if test.is_empty() {
        return Err(Error::InsufficientData("no test windows".into()));
    }
    let pretrain_audit = SplitAudit::new(format!("fold {k} pretraining"), fold.train.iter().cloned());
    let finetune_audit = SplitAudit::new(format!("fold {k} fine-tuning"), fold.train.iter().chain(&fold.val).cloned());
    let grid = exp.scale_grid()?;

    let mut models = Vec::new();
    let mut checkpoints = BTreeMap::new();
    for &stream in exp.fusion.streams() {
        let ck = if exp.finetune.fully_supervised {
            let mut blank = ModelCheckpoint::new(architecture_id(stream, exp.pretrain.objective), seed);
            blank.manifest.scale_grid = Some(grid.clone());
            blank
        } else if let Some(ck) = shared.and_then(|s| s.get(stream)) {
            ck.clone()
        } else {
            pretrain(&exp.pretrain_config(stream, seed)?, &train, Some(&pretrain_audit))?
        };
        if !exp.finetune.fully_supervised {
            checkpoints.insert(stream.to_string(), ck.manifest.weights_sha256.clone());
        }
        let cfg = exp.finetune_config(stream, seed);
        let (model, _) = finetune(&ck, &train, &val, &data.label_map, &cfg, Some(&finetune_audit))?;
        models.push(model);
    }

    let y = labels_of(&test)?;
    let c = data.label_map.len();
    let scores: Vec<Vec<Vec<f64>>> = models.iter().map(|m| m.predict_batch(&test)).collect::<Result<_>>()?;
    let mut streams = BTreeMap::new();
    for (m, s) in models.iter().zip(&scores) {
        streams.insert(m.stream().to_string(), Metrics::from_scores(s, &y, c)?);
    }
    let fused_scores = match exp.fusion {
        FusionMode::SignalOnly | FusionMode::ScalogramOnly => scores[0].clone(),
        FusionMode::Score => scores[0]
            .iter()
            .zip(&scores[1])
            .map(|(p, q)| fuse_scores_weighted(p, q, exp.fusion_weight))
            .collect::<Result<_>>()?,
        FusionMode::Feature => {
            let cfg = exp.finetune_config(Stream::Signal, seed);
            let (fusion, _) = train_fusion_head(&models[0], &models[1], &train, &val, &cfg, Some(&finetune_audit))?;
            fusion.predict_batch(&test)?
        }
    };
    let fused = Metrics::from_scores(&fused_scores, &y, c)?;
    Ok(FoldOutcome {
        report: FoldReport {
            fold: k,
            train_subjects: fold.train.clone(),
            val_subjects: fold.val.clone(),
            test_subjects: fold.test.clone(),
            test_windows: test.len(),
            fused,
            streams,
            checkpoints,
        },
        models,
    })
}

/// Run every fold of `plan` and aggregate. Folds run in parallel on the
/// current thread pool; results are ordered by fold index.
pub fn run_scheme(
    plan: &SplitPlan,
    data: &Windowed,
    exp: &ExperimentConfig,
    shared: Option<&SharedEncoders>,
) -> Result<MetricsReport> {
    let folds: Vec<FoldReport> = plan
        .folds
        .par_iter()
        .enumerate()
        .map(|(k, fold)| {
            run_fold(k, fold, data, exp, shared)
                .map(|o| o.report)
                .map_err(|e| Error::Fold {
                    fold: k,
                    source: Box::new(e),
                })
        })
        .collect::<Result<_>>()?;
    Ok(MetricsReport::assemble(exp, &data.label_map, folds, shared.is_some()))
}

/// Pretrain once on `source` (all subjects, labels ignored) and evaluate
/// fine-tuned heads on `target` under `plan`.
pub fn transfer_protocol(
    source: &[SignalWindow],
    target: &Windowed,
    plan: &SplitPlan,
    exp: &ExperimentConfig,
) -> Result<MetricsReport> {
    let want = source.first().map_or(0, SignalWindow::len);
    if let Some(w) = source.iter().chain(&target.windows).find(|w| w.len() != want) {
        return Err(Error::WindowMismatch(want, w.len()));
    }
    let refs: Vec<&SignalWindow> = source.iter().collect();
    let shared = pretrain_shared(exp, &refs, exp.seed)?;
    let mut report = run_scheme(plan, target, exp, Some(&shared))?;
    report.provenance.transfer = true;
    Ok(report)
}

pub const EMBEDDING_STREAM_COLUMN: &str = "stream";

/// Write `subject,label,e0..e{d-1},stream` rows, one per window. Unlabeled
/// windows get an empty label.
pub fn export_embeddings(
    encoder: &Encoder,
    featurizer: &Featurizer,
    windows: &[&SignalWindow],
    labels: &LabelMap,
    path: &Path,
) -> Result<()> {
    let embeddings: Vec<Vec<f64>> = windows
        .par_iter()
        .map(|w| encoder.embed(&featurizer.input(w)?))
        .collect::<Result<_>>()?;
    let mut out = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let d = encoder.embed_dim();
    let mut header = vec!["subject".to_string(), "label".to_string()];
    header.extend((0..d).map(|i| format!("e{i}")));
    header.push(EMBEDDING_STREAM_COLUMN.into());
    out.write_record(&header).map_err(|e| csv_io(path, e))?;
    let stream = encoder.stream().to_string();
    for (w, e) in windows.iter().zip(&embeddings) {
        let mut row = vec![
            w.subject.clone(),
            w.label.and_then(|l| labels.name(l)).unwrap_or("").to_string(),
        ];
        row.extend(e.iter().map(|v| v.to_string()));
        row.push(stream.clone());
        out.write_record(&row).map_err(|e| csv_io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidParams(format!("{}: {other:?}", path.display())),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub subject: String,
    pub label: String,
    pub embedding: Vec<f64>,
    pub stream: String,
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let n = rec.len();
        if n < 3 {
            return Err(Error::MalformedRow {
                line: i + 2,
                reason: "too few columns".into(),
            });
        }
        let embedding = (2..n - 1)
            .map(|k| {
                rec[k].parse::<f64>().map_err(|e| Error::MalformedRow {
                    line: i + 2,
                    reason: e.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        rows.push(EmbeddingRow {
            subject: rec[0].to_string(),
            label: rec[1].to_string(),
            embedding,
            stream: rec[n - 1].to_string(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn cm(rows: &[&[u64]]) -> ConfusionMatrix {
        ConfusionMatrix {
            counts: rows.iter().map(|r| r.to_vec()).collect(),
        }
    }

    #[test]
    fn confusion_examples() {
        let m = confusion(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(m, cm(&[&[1, 0, 0], &[0, 2, 0], &[0, 0, 1]]));
        assert_eq!(confusion(&[], &[], 4).unwrap(), ConfusionMatrix::zeros(4));
        assert!(matches!(confusion(&[3], &[0], 3), Err(Error::IndexOutOfRange { index: 3, classes: 3 })));
        assert!(matches!(confusion(&[0], &[0, 1], 3), Err(Error::LengthMismatch(1, 2))));
    }

    #[test]
    fn confusion_matches_tally() {
        let mut r = RngStream::new(1, 1).rng();
        let preds: Vec<usize> = (0..200).map(|_| r.random_range(0..4)).collect();
        let labels: Vec<usize> = (0..200).map(|_| r.random_range(0..4)).collect();
        let m = confusion(&preds, &labels, 4).unwrap();
        let mut tally = BTreeMap::new();
        for pair in labels.iter().zip(&preds) {
            *tally.entry(pair).or_insert(0u64) += 1;
        }
        for t in 0..4 {
            for p in 0..4 {
                assert_eq!(m.counts[t][p], tally.get(&(&t, &p)).copied().unwrap_or(0));
            }
        }
        assert_eq!(m.total(), 200);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(weighted_f1(&cm(&[&[5, 0], &[0, 7]])).unwrap(), 1.0);
        assert_eq!(weighted_f1(&cm(&[&[40, 10], &[10, 40]])).unwrap(), 0.8);
        // The third class has no support and carries no weight.
        let f = weighted_f1(&cm(&[&[3, 0, 1], &[0, 4, 0], &[0, 0, 0]])).unwrap();
        let (p0, r0) = (3.0 / 3.0, 3.0 / 4.0);
        let f1_0 = 2.0 * p0 * r0 / (p0 + r0);
        assert_abs_diff_eq!(f, (4.0 * f1_0 + 4.0 * 1.0) / 8.0, epsilon = 1e-15);
        assert!(matches!(weighted_f1(&ConfusionMatrix::zeros(3)), Err(Error::EmptyMatrix)));
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(cohen_kappa(&cm(&[&[50, 0], &[0, 50]])).unwrap(), 1.0);
        assert_eq!(cohen_kappa(&cm(&[&[40, 10], &[10, 40]])).unwrap(), 0.6);
        assert_eq!(cohen_kappa(&cm(&[&[25, 25], &[25, 25]])).unwrap(), 0.0);
        assert!(matches!(cohen_kappa(&cm(&[&[9, 0], &[0, 0]])), Err(Error::Degenerate)));
    }

    #[test]
    fn summary_uses_sample_std() {
        let m = |f: f64, k: Option<f64>| Metrics {
            weighted_f1: f,
            kappa: k,
            accuracy: f,
            confusion: ConfusionMatrix::zeros(2),
        };
        let a = m(0.5, Some(0.2));
        let b = m(0.7, None);
        let c = m(0.9, Some(0.4));
        let s = Summary::of(&[&a, &b, &c]);
        assert_abs_diff_eq!(s.mean.weighted_f1, 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(s.std.weighted_f1, 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(s.mean.kappa.unwrap(), 0.3, epsilon = 1e-12);
        assert_eq!(Summary::of(&[&b]).mean.kappa, None);
        assert_eq!(Summary::of(&[&a]).std.weighted_f1, 0.0);
    }

    #[test]
    fn fold_seeds_differ() {
        assert_ne!(fold_seed(1, 0), fold_seed(1, 1));
        assert_eq!(fold_seed(1, 3), fold_seed(1, 3));
    }
}
