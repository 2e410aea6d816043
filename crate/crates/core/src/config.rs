//! Experiment configuration: a TOML document with a fixed schema, dotted-path
//! overrides and sweep expansion.
//!
//! ```toml
//! seed = 7
//! scheme = "scheme2"
//! fusion = "score"
//!
//! [data.synth]
//! num_subjects = 8
//! windows_per_subject_class = 4
//! noise_std = 0.1
//! seed = 1
//! classes = [{ name = "walk", frequency_hz = 2.0, amplitude = 1.0 }]
//!
//! [pretrain]
//! signal_epochs = 10
//!
//! [[sweep]]
//! key = "pretrain.tau"
//! values = [0.1, 0.5, 1.0]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{Pipeline, PipelineMode, Step, TemporalSpec, TimeFreqSpec};
use crate::contrastive::{Objective, PretrainConfig, Stream};
use crate::dataio::{load_csv, RecordingSet, Scheme, SynthSpec, SYNTH_RATE_HZ, WINDOW_LEN};
use crate::downstream::FinetuneConfig;
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, Precision};
use crate::wavelet::{scale_grid, ScaleGrid, DEFAULT_F_MAX_HZ, DEFAULT_F_MIN_HZ, SCALOGRAM_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Mean of the two streams' class probabilities.
    #[default]
    Score,
    /// Shared head over concatenated embeddings.
    Feature,
    SignalOnly,
    ScalogramOnly,
}

impl FusionMode {
    pub fn streams(self) -> &'static [Stream] {
        match self {
            FusionMode::Score | FusionMode::Feature => &[Stream::Signal, Stream::Scalogram],
            FusionMode::SignalOnly => &[Stream::Signal],
            FusionMode::ScalogramOnly => &[Stream::Scalogram],
        }
    }
}

/// One labeled corpus: a CSV file or a synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
    #[serde(default = "default_rate")]
    pub sample_rate_hz: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            synth: None,
            sample_rate_hz: SYNTH_RATE_HZ,
        }
    }
}

impl CorpusConfig {
    fn validate(&self, what: &str) -> Result<()> {
        match (&self.corpus, &self.synth) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => return Err(Error::Config(format!("{what}: set exactly one of `corpus` and `synth`"))),
        }
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz.is_finite()) {
            return Err(Error::Config(format!("{what}.sample_rate_hz must be positive")));
        }
        Ok(())
    }

    /// Load the CSV (paths relative to `base`) or generate the synthetic corpus.
    pub fn load(&self, base: &Path) -> Result<RecordingSet> {
        match (&self.corpus, &self.synth) {
            (Some(p), _) => load_csv(&base.join(p), self.sample_rate_hz),
            (None, Some(s)) => s.generate(),
            (None, None) => Err(Error::Config("no corpus configured".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
    #[serde(default = "default_rate")]
    pub sample_rate_hz: f64,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_f_min")]
    pub f_min_hz: f64,
    #[serde(default = "default_f_max")]
    pub f_max_hz: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            synth: None,
            sample_rate_hz: SYNTH_RATE_HZ,
            stride: default_stride(),
            val_fraction: default_val_fraction(),
            test_fraction: default_test_fraction(),
            f_min_hz: DEFAULT_F_MIN_HZ,
            f_max_hz: DEFAULT_F_MAX_HZ,
        }
    }
}

impl DataConfig {
    pub fn source(&self) -> CorpusConfig {
        CorpusConfig {
            corpus: self.corpus.clone(),
            synth: self.synth.clone(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSettings {
    #[serde(default)]
    pub objective: Objective,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_signal_pretrain_epochs")]
    pub signal_epochs: usize,
    #[serde(default = "default_scalogram_pretrain_epochs")]
    pub scalogram_epochs: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Pretrain once on every subject instead of per fold. Leaks test
    /// subjects into pretraining; off by default.
    #[serde(default)]
    pub shared: bool,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        Self {
            objective: Objective::Ntxent,
            batch_size: default_batch(),
            signal_epochs: default_signal_pretrain_epochs(),
            scalogram_epochs: default_scalogram_pretrain_epochs(),
            tau: default_tau(),
            learning_rate: default_lr(),
            shared: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSettings {
    #[serde(default)]
    pub mode: PipelineMode,
    #[serde(default = "default_temporal")]
    pub temporal: Vec<Step<TemporalSpec>>,
    #[serde(default = "default_timefreq")]
    pub timefreq: Vec<Step<TimeFreqSpec>>,
}

impl Default for AugmentSettings {
    fn default() -> Self {
        Self {
            mode: PipelineMode::Composed,
            temporal: default_temporal(),
            timefreq: default_timefreq(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSettings {
    #[serde(default = "default_signal_finetune_epochs")]
    pub signal_epochs: usize,
    #[serde(default = "default_scalogram_finetune_epochs")]
    pub scalogram_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_true")]
    pub unfreeze_last_conv: bool,
    /// Scalogram-stream override of `unfreeze_last_conv`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scalogram_unfreeze_last_conv: Option<bool>,
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Train encoders from scratch with labels only.
    #[serde(default)]
    pub fully_supervised: bool,
}

impl Default for FinetuneSettings {
    fn default() -> Self {
        Self {
            signal_epochs: default_signal_finetune_epochs(),
            scalogram_epochs: default_scalogram_finetune_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            unfreeze_last_conv: true,
            scalogram_unfreeze_last_conv: None,
            patience: default_patience(),
            fully_supervised: false,
        }
    }
}

/// Pretrain on an external corpus, then fine-tune and evaluate on `data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSettings {
    pub pretrain: CorpusConfig,
}

/// One sweep axis: every value of `key` becomes a separate run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<toml::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    #[serde(default)]
    pub fusion: FusionMode,
    #[serde(default = "default_fusion_weight")]
    pub fusion_weight: f64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub pretrain: PretrainSettings,
    #[serde(default)]
    pub augment: AugmentSettings,
    #[serde(default)]
    pub finetune: FinetuneSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer: Option<TransferSettings>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<SweepAxis>,
}

fn default_rate() -> f64 {
    SYNTH_RATE_HZ
}
fn default_stride() -> usize {
    WINDOW_LEN / 2
}
fn default_val_fraction() -> f64 {
    0.2
}
fn default_test_fraction() -> f64 {
    0.25
}
fn default_f_min() -> f64 {
    DEFAULT_F_MIN_HZ
}
fn default_f_max() -> f64 {
    DEFAULT_F_MAX_HZ
}
fn default_batch() -> usize {
    128
}
fn default_signal_pretrain_epochs() -> usize {
    150
}
fn default_scalogram_pretrain_epochs() -> usize {
    50
}
fn default_signal_finetune_epochs() -> usize {
    70
}
fn default_scalogram_finetune_epochs() -> usize {
    50
}
fn default_tau() -> f64 {
    0.5
}
fn default_lr() -> f64 {
    1e-3
}
fn default_true() -> bool {
    true
}
fn default_patience() -> usize {
    10
}
fn default_scheme() -> Scheme {
    Scheme::Scheme1
}
fn default_fusion_weight() -> f64 {
    crate::downstream::DEFAULT_FUSION_WEIGHT
}
fn default_output() -> PathBuf {
    PathBuf::from("runs")
}
fn default_temporal() -> Vec<Step<TemporalSpec>> {
    TemporalSpec::all_defaults()
        .into_iter()
        .map(|transform| Step { transform, p: 0.5 })
        .collect()
}
fn default_timefreq() -> Vec<Step<TimeFreqSpec>> {
    TimeFreqSpec::all_defaults()
        .into_iter()
        .map(|transform| Step { transform, p: 0.5 })
        .collect()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty document yields defaults")
    }
}

/// Parse a `key.path=value` override into its path and TOML value. Values
/// that do not parse as TOML are taken as bare strings.
pub fn parse_override(s: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not of the form key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("override key `{key}` has an empty component")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((path, value))
}

/// Set `value` at a dotted path, creating intermediate tables.
pub fn set_path(doc: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().ok_or_else(|| Error::Config("empty override key".into()))?;
    let mut table = doc;
    for p in parents {
        let entry = table
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{}` is not a table", path.join("."))))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parse TOML text, apply `key=value` overrides, then validate.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        for o in overrides {
            let (path, value) = parse_override(o)?;
            set_path(&mut doc, &path, value)?;
        }
        Self::from_table(doc)
    }

    pub fn from_table(doc: toml::Table) -> Result<Self> {
        let cfg: Self = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.source().validate("data")?;
        if let Some(t) = &self.transfer {
            t.pretrain.validate("transfer.pretrain")?;
        }
        if self.data.stride == 0 {
            return Err(Error::Config("data.stride must be positive".into()));
        }
        for (name, f) in [("data.val_fraction", self.data.val_fraction), ("data.test_fraction", self.data.test_fraction)] {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {f}")));
            }
        }
        if !(0.0..=1.0).contains(&self.fusion_weight) {
            return Err(Error::Config(format!("fusion_weight must lie in [0, 1], got {}", self.fusion_weight)));
        }
        let p = &self.pretrain;
        if p.batch_size < 2 || p.signal_epochs == 0 || p.scalogram_epochs == 0 {
            return Err(Error::Config("pretrain needs batch_size >= 2 and at least one epoch".into()));
        }
        if !(p.tau > 0.0 && p.tau.is_finite()) {
            return Err(Error::Config(format!("pretrain.tau must be positive, got {}", p.tau)));
        }
        let f = &self.finetune;
        if f.batch_size == 0 || f.signal_epochs == 0 || f.scalogram_epochs == 0 || f.patience == 0 {
            return Err(Error::Config("finetune needs positive batch_size, epochs and patience".into()));
        }
        for lr in [p.learning_rate, f.learning_rate] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("learning rates must be positive, got {lr}")));
            }
        }
        if self.augment.temporal.is_empty() || self.augment.timefreq.is_empty() {
            return Err(Error::Config("augmentation pipelines must not be empty".into()));
        }
        for s in &self.augment.temporal {
            s.transform.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        for s in &self.augment.timefreq {
            s.transform.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        self.scale_grid()?;
        Ok(())
    }

    /// Scale grid of the scalogram stream for the configured sample rate.
    pub fn scale_grid(&self) -> Result<ScaleGrid> {
        scale_grid(SCALOGRAM_SIZE, self.data.f_min_hz, self.data.f_max_hz, 1.0 / self.data.sample_rate_hz)
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn pretrain_config(&self, stream: Stream, seed: u64) -> Result<PretrainConfig> {
        let mut c = PretrainConfig::new(stream, self.scale_grid()?, seed);
        c.objective = self.pretrain.objective;
        c.batch_size = self.pretrain.batch_size;
        c.epochs = match stream {
            Stream::Signal => self.pretrain.signal_epochs,
            Stream::Scalogram => self.pretrain.scalogram_epochs,
        };
        c.tau = self.pretrain.tau;
        c.adam = AdamConfig {
            learning_rate: self.pretrain.learning_rate,
            ..AdamConfig::default()
        };
        c.temporal = Pipeline {
            steps: self.augment.temporal.clone(),
            mode: self.augment.mode,
        };
        c.timefreq = Pipeline {
            steps: self.augment.timefreq.clone(),
            mode: self.augment.mode,
        };
        c.precision = self.precision;
        Ok(c)
    }

    pub fn finetune_config(&self, stream: Stream, seed: u64) -> FinetuneConfig {
        let f = &self.finetune;
        FinetuneConfig {
            epochs: match stream {
                Stream::Signal => f.signal_epochs,
                Stream::Scalogram => f.scalogram_epochs,
            },
            adam: AdamConfig {
                learning_rate: f.learning_rate,
                ..AdamConfig::default()
            },
            batch_size: f.batch_size,
            unfreeze_last_conv: match stream {
                Stream::Signal => f.unfreeze_last_conv,
                Stream::Scalogram => f.scalogram_unfreeze_last_conv.unwrap_or(f.unfreeze_last_conv),
            },
            patience: f.patience,
            seed,
            precision: self.precision,
            fully_supervised: f.fully_supervised,
        }
    }

    /// Canonical TOML snapshot; re-parsing it yields an equal config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical snapshot.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// One config per point of the Cartesian product of the sweep axes, each
    /// with its sweep list cleared and a label such as `pretrain.tau=0.1`.
    /// Without axes the result is the config itself with an empty label.
    pub fn expand_sweep(&self) -> Result<Vec<(String, ExperimentConfig)>> {
        let mut base = self.clone();
        let axes = std::mem::take(&mut base.sweep);
        let base_doc = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        let mut points: Vec<(Vec<String>, toml::Table)> = vec![(Vec::new(), base_doc)];
        for axis in &axes {
            if axis.values.is_empty() {
                return Err(Error::Config(format!("sweep over `{}` has no values", axis.key)));
            }
            let path: Vec<String> = axis.key.split('.').map(str::to_string).collect();
            let mut next = Vec::with_capacity(points.len() * axis.values.len());
            for (labels, doc) in &points {
                for v in &axis.values {
                    let mut d = doc.clone();
                    set_path(&mut d, &path, v.clone())?;
                    let mut l = labels.clone();
                    l.push(format!("{}={}", axis.key, v));
                    next.push((l, d));
                }
            }
            points = next;
        }
        points
            .into_iter()
            .map(|(labels, doc)| Ok((labels.join(","), Self::from_table(doc)?)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SYNTH: &str = r#"
        [data.synth]
        num_subjects = 6
        windows_per_subject_class = 2
        noise_std = 0.1
        seed = 3
        classes = [{ name = "a", frequency_hz = 2.0, amplitude = 1.0 },
                   { name = "b", frequency_hz = 5.0, amplitude = 1.0 }]
    "#;

    #[test]
    fn defaults_follow_documented_values() {
        let c = ExperimentConfig::from_toml(SYNTH, &[]).unwrap();
        assert_eq!(c.pretrain.batch_size, 128);
        assert_eq!((c.pretrain.signal_epochs, c.pretrain.scalogram_epochs), (150, 50));
        assert_eq!((c.finetune.signal_epochs, c.finetune.scalogram_epochs), (70, 50));
        assert_eq!(c.fusion, FusionMode::Score);
        assert_eq!(c.scheme, Scheme::Scheme1);
        assert!(c.finetune.unfreeze_last_conv);
        assert_eq!(c.finetune_config(Stream::Scalogram, 1).epochs, 50);
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = ExperimentConfig::from_toml(&format!("{SYNTH}\n[pretrain]\ntemperature = 0.2\n"), &[]).unwrap_err();
        assert!(matches!(&e, Error::Config(m) if m.contains("temperature")), "{e}");
        let e = ExperimentConfig::from_toml(SYNTH, &["bogus=1".into()]).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
    }

    #[test]
    fn overrides_use_dotted_paths() {
        let c = ExperimentConfig::from_toml(
            SYNTH,
            &["pretrain.tau=0.1".into(), "fusion=feature".into(), "finetune.unfreeze_last_conv=false".into()],
        )
        .unwrap();
        assert_eq!(c.pretrain.tau, 0.1);
        assert_eq!(c.fusion, FusionMode::Feature);
        assert!(!c.finetune_config(Stream::Signal, 0).unfreeze_last_conv);
        assert!(ExperimentConfig::from_toml(SYNTH, &["pretrain.tau".into()]).is_err());
        assert!(ExperimentConfig::from_toml(SYNTH, &["pretrain.tau=-1".into()]).is_err());
    }

    #[test]
    fn corpus_source_must_be_unique() {
        assert!(ExperimentConfig::from_toml("", &[]).is_err());
        let both = format!("{SYNTH}\n[data]\ncorpus = \"x.csv\"\n");
        assert!(ExperimentConfig::from_toml(&both, &[]).is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let c = ExperimentConfig::from_toml(SYNTH, &["seed=9".into(), "augment.mode=one-of".into()]).unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml(), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(ExperimentConfig::from_toml(SYNTH, &[]).unwrap().hash(), c.hash());
    }

    #[test]
    fn sweep_expands_cartesian_product() {
        let text = format!(
            "{SYNTH}\n[[sweep]]\nkey = \"pretrain.tau\"\nvalues = [0.1, 0.5]\n\n[[sweep]]\nkey = \"fusion\"\nvalues = [\"score\", \"feature\", \"signal-only\"]\n"
        );
        let c = ExperimentConfig::from_toml(&text, &[]).unwrap();
        let runs = c.expand_sweep().unwrap();
        assert_eq!(runs.len(), 6);
        assert_eq!(runs[0].0, "pretrain.tau=0.1,fusion=\"score\"");
        assert_eq!(runs[5].1.pretrain.tau, 0.5);
        assert_eq!(runs[5].1.fusion, FusionMode::SignalOnly);
        assert!(runs.iter().all(|(_, r)| r.sweep.is_empty()));
        let single = ExperimentConfig::from_toml(SYNTH, &[]).unwrap().expand_sweep().unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].0, "");
    }

    #[test]
    fn pretrain_config_carries_pipelines() {
        let c = ExperimentConfig::from_toml(SYNTH, &["augment.mode=one-of".into(), "pretrain.objective=stopgrad".into()])
            .unwrap();
        let p = c.pretrain_config(Stream::Signal, 4).unwrap();
        assert_eq!(p.temporal.mode, PipelineMode::OneOf);
        assert_eq!(p.objective, Objective::Stopgrad);
        assert_eq!(p.epochs, 150);
        assert_eq!(p.seed, 4);
    }
}
