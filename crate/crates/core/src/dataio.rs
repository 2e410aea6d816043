//! Accelerometer corpora: CSV ingest, fixed-length windowing, subject-disjoint
//! split plans and deterministic synthetic corpora.
//!
//! Input CSV format (UTF-8, decimal point reals):
//!
//! ```text
//! subject,label,x,y,z
//! s01,walk,0.12,-9.70,0.33
//! ```
//!
//! Each contiguous run of rows sharing `(subject, label)` is one recording.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Samples per window expected by both encoders.
pub const WINDOW_LEN: usize = 128;
/// Accelerometer axes.
pub const CHANNELS: usize = 3;
/// Sampling rate of synthetic corpora.
pub const SYNTH_RATE_HZ: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recording {
    pub subject: String,
    pub label: String,
    pub samples: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingSet {
    recordings: Vec<Recording>,
    sample_rate_hz: f64,
}

impl RecordingSet {
    pub fn new(recordings: Vec<Recording>, sample_rate_hz: f64) -> Result<Self> {
        if !(sample_rate_hz > 0.0 && sample_rate_hz.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "sample rate must be positive, got {sample_rate_hz}"
            )));
        }
        if let Some(r) = recordings.iter().find(|r| r.samples.is_empty()) {
            return Err(Error::InvalidParams(format!(
                "recording {}/{} has no samples",
                r.subject, r.label
            )));
        }
        Ok(Self {
            recordings,
            sample_rate_hz,
        })
    }

    pub fn recordings(&self) -> &[Recording] {
        &self.recordings
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn total_samples(&self) -> usize {
        self.recordings.iter().map(|r| r.samples.len()).sum()
    }

    pub fn label_map(&self) -> LabelMap {
        LabelMap::from_labels(self.recordings.iter().map(|r| r.label.as_str()))
    }

    pub fn subjects(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.recordings.iter().map(|r| r.subject.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }
}

/// Dense class indices assigned in lexicographic order of label strings.
/// The empty label marks unlabeled data and gets no index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    labels: Vec<String>,
}

impl LabelMap {
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<&str> = labels.into_iter().filter(|l| !l.is_empty()).collect();
        Self {
            labels: set.into_iter().map(String::from).collect(),
        }
    }

    pub fn index(&self, label: &str) -> Option<usize> {
        self.labels.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.labels.get(index).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// One fixed-length, subject-attributed slice of a recording.
///
/// `values` is row-major `(len, 3)`: sample `t`, channel `c` at `3 * t + c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalWindow {
    pub values: Vec<f64>,
    pub subject: String,
    pub label: Option<usize>,
    pub recording: usize,
    pub source_offset: usize,
}

impl SignalWindow {
    pub fn len(&self) -> usize {
        self.values.len() / CHANNELS
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.values.iter().skip(c).step_by(CHANNELS).copied().collect()
    }

    pub fn check_shape(&self, len: usize) -> Result<()> {
        if self.values.len() != len * CHANNELS {
            return Err(Error::bad_shape(
                format!("({len}, {CHANNELS})"),
                format!("{} values", self.values.len()),
            ));
        }
        Ok(())
    }
}

pub fn load_csv(path: &Path, expected_rate_hz: f64) -> Result<RecordingSet> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let header = reader.headers()?.clone();
    let expected = ["subject", "label", "x", "y", "z"];
    if header.len() != expected.len() || header.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::MalformedRow {
            line: 1,
            reason: format!("header must be `subject,label,x,y,z`, got `{}`", header.iter().collect::<Vec<_>>().join(",")),
        });
    }

    let mut recordings: Vec<Recording> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != 5 {
            return Err(Error::MalformedRow {
                line,
                reason: format!("expected 5 columns, found {}", record.len()),
            });
        }
        let mut xyz = [0.0; 3];
        for (c, v) in xyz.iter_mut().enumerate() {
            let field = &record[2 + c];
            *v = field
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::MalformedRow {
                    line,
                    reason: format!("non-numeric value `{field}`"),
                })?;
        }
        let (subject, label) = (&record[0], &record[1]);
        match recordings.last_mut() {
            Some(r) if r.subject == subject && r.label == label => r.samples.push(xyz),
            _ => recordings.push(Recording {
                subject: subject.to_string(),
                label: label.to_string(),
                samples: vec![xyz],
            }),
        }
    }
    if recordings.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    RecordingSet::new(recordings, expected_rate_hz)
}

pub fn write_csv(rs: &RecordingSet, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["subject", "label", "x", "y", "z"])?;
    for r in rs.recordings() {
        for s in &r.samples {
            w.write_record([
                r.subject.as_str(),
                r.label.as_str(),
                &s[0].to_string(),
                &s[1].to_string(),
                &s[2].to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Windows cut from a corpus plus the recordings that were too short.
#[derive(Debug, Clone)]
pub struct Windowed {
    pub windows: Vec<SignalWindow>,
    pub label_map: LabelMap,
    pub skipped_recordings: usize,
}

pub fn window(rs: &RecordingSet, window_len: usize, stride: usize) -> Result<Windowed> {
    if window_len == 0 || stride == 0 {
        return Err(Error::InvalidParams(format!(
            "window_len ({window_len}) and stride ({stride}) must be positive"
        )));
    }
    let label_map = rs.label_map();
    let mut windows = Vec::new();
    let mut skipped = 0;
    for (ri, r) in rs.recordings().iter().enumerate() {
        let len = r.samples.len();
        if len < window_len {
            skipped += 1;
            continue;
        }
        let label = label_map.index(&r.label);
        for offset in (0..=len - window_len).step_by(stride) {
            let values = r.samples[offset..offset + window_len]
                .iter()
                .flat_map(|s| s.iter().copied())
                .collect();
            windows.push(SignalWindow {
                values,
                subject: r.subject.clone(),
                label,
                recording: ri,
                source_offset: offset,
            });
        }
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} recordings shorter than {window_len} samples");
    }
    Ok(Windowed {
        windows,
        label_map,
        skipped_recordings: skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Five subject-disjoint folds; every subject is tested exactly once.
    Scheme1,
    /// One held-out group of test subjects.
    Scheme2,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub scheme: Scheme,
    pub folds: Vec<Fold>,
    pub seed: u64,
}

pub const SCHEME1_FOLDS: usize = 5;

fn split_off_validation(mut train_side: Vec<String>, val_fraction: f64, rng: &mut impl Rng) -> (Vec<String>, Vec<String>) {
    train_side.shuffle(rng);
    let n = train_side.len();
    let n_val = ((val_fraction * n as f64).round() as usize).min(n.saturating_sub(1));
    let mut val = train_side.split_off(n - n_val);
    let mut train = train_side;
    train.sort();
    val.sort();
    (train, val)
}

pub fn make_splits(
    windows: &[SignalWindow],
    scheme: Scheme,
    seed: u64,
    val_fraction: f64,
    test_fraction: f64,
) -> Result<SplitPlan> {
    for (name, f) in [("val_fraction", val_fraction), ("test_fraction", test_fraction)] {
        if !(0.0..1.0).contains(&f) {
            return Err(Error::InvalidParams(format!("{name} must lie in [0, 1), got {f}")));
        }
    }
    let universe: BTreeSet<&str> = windows.iter().map(|w| w.subject.as_str()).collect();
    let mut subjects: Vec<String> = universe.into_iter().map(String::from).collect();
    let needed = match scheme {
        Scheme::Scheme1 => SCHEME1_FOLDS,
        Scheme::Scheme2 => 2,
    };
    if subjects.len() < needed {
        return Err(Error::TooFewSubjects {
            needed,
            found: subjects.len(),
        });
    }
    let mut rng = RngStream::new(seed, 0x5917).rng();
    subjects.shuffle(&mut rng);
    let n = subjects.len();

    let folds = match scheme {
        Scheme::Scheme1 => (0..SCHEME1_FOLDS)
            .map(|k| {
                let lo = k * n / SCHEME1_FOLDS;
                let hi = (k + 1) * n / SCHEME1_FOLDS;
                let mut test: Vec<String> = subjects[lo..hi].to_vec();
                test.sort();
                let rest: Vec<String> = subjects[..lo].iter().chain(&subjects[hi..]).cloned().collect();
                let (train, val) = split_off_validation(rest, val_fraction, &mut rng);
                Fold { train, val, test }
            })
            .collect(),
        Scheme::Scheme2 => {
            let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);
            let mut test: Vec<String> = subjects[..n_test].to_vec();
            test.sort();
            let (train, val) = split_off_validation(subjects[n_test..].to_vec(), val_fraction, &mut rng);
            vec![Fold { train, val, test }]
        }
    };
    Ok(SplitPlan { scheme, folds, seed })
}

impl Fold {
    pub fn select<'a>(subjects: &[String], windows: &'a [SignalWindow]) -> Vec<&'a SignalWindow> {
        let set: BTreeSet<&str> = subjects.iter().map(String::as_str).collect();
        windows.iter().filter(|w| set.contains(w.subject.as_str())).collect()
    }
}

/// Guard asserting that only windows of permitted subjects reach a training phase.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAudit {
    phase: String,
    allowed: BTreeSet<String>,
}

impl SplitAudit {
    pub fn new(phase: impl Into<String>, allowed: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            phase: phase.into(),
            allowed: allowed.into_iter().map(Into::into).collect(),
        }
    }

    pub fn check(&self, w: &SignalWindow) -> Result<()> {
        if self.allowed.contains(&w.subject) {
            Ok(())
        } else {
            Err(Error::Leakage {
                subject: w.subject.clone(),
                phase: self.phase.clone(),
            })
        }
    }
}

/// One synthetic activity class: a sinusoid on every axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub frequency_hz: f64,
    pub amplitude: f64,
    #[serde(default)]
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_subjects: usize,
    pub classes: Vec<ClassSpec>,
    pub windows_per_subject_class: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn generate(&self) -> Result<RecordingSet> {
        synth_dataset(
            self.num_subjects,
            &self.classes,
            self.windows_per_subject_class,
            self.noise_std,
            self.seed,
        )
    }
}

/// Classes at the given frequencies, named `c00`, `c01`, ...
pub fn sinusoid_classes(frequencies_hz: &[f64], amplitude: f64) -> Vec<ClassSpec> {
    frequencies_hz
        .iter()
        .enumerate()
        .map(|(i, &f)| ClassSpec {
            name: format!("c{i:02}"),
            frequency_hz: f,
            amplitude,
            offset: 0.0,
        })
        .collect()
}

/// Deterministic corpus: per subject and class, one recording of
/// `windows_per_subject_class * WINDOW_LEN` samples at 50 Hz where channel `c`
/// is `amplitude * sin(2π f t + φ[subject][c]) + offset + N(0, noise_std²)`.
pub fn synth_dataset(
    num_subjects: usize,
    classes: &[ClassSpec],
    windows_per_subject_class: usize,
    noise_std: f64,
    seed: u64,
) -> Result<RecordingSet> {
    if num_subjects == 0 || classes.is_empty() || windows_per_subject_class == 0 {
        return Err(Error::InvalidSpec(
            "need at least one subject, one class and one window".into(),
        ));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::InvalidSpec(format!("noise_std must be >= 0, got {noise_std}")));
    }
    let mut seen_freq: Vec<f64> = Vec::new();
    let mut seen_name = BTreeSet::new();
    for c in classes {
        if !(c.frequency_hz > 0.0 && c.frequency_hz.is_finite()) {
            return Err(Error::InvalidSpec(format!("class {} frequency must be positive", c.name)));
        }
        if seen_freq.contains(&c.frequency_hz) {
            return Err(Error::InvalidSpec(format!("duplicate class frequency {} Hz", c.frequency_hz)));
        }
        if !seen_name.insert(c.name.as_str()) {
            return Err(Error::InvalidSpec(format!("duplicate class name {}", c.name)));
        }
        seen_freq.push(c.frequency_hz);
    }

    let root = RngStream::new(seed, 0x5e17);
    let width = num_subjects.to_string().len().max(2);
    let len = windows_per_subject_class * WINDOW_LEN;
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let mut recordings = Vec::with_capacity(num_subjects * classes.len());
    for s in 0..num_subjects {
        let subject = format!("s{:0width$}", s + 1);
        let mut phase_rng = root.derive(&[s as u64]).rng();
        let phases: [f64; 3] = std::array::from_fn(|_| phase_rng.random_range(0.0..2.0 * PI));
        for (ci, class) in classes.iter().enumerate() {
            let mut rng = root.derive(&[s as u64, ci as u64 + 1]).rng();
            let samples = (0..len)
                .map(|n| {
                    let t = n as f64 / SYNTH_RATE_HZ;
                    std::array::from_fn(|c| {
                        let clean = class.amplitude * (2.0 * PI * class.frequency_hz * t + phases[c]).sin() + class.offset;
                        if noise_std > 0.0 {
                            clean + noise.sample(&mut rng)
                        } else {
                            clean
                        }
                    })
                })
                .collect();
            recordings.push(Recording {
                subject: subject.clone(),
                label: class.name.clone(),
                samples,
            });
        }
    }
    RecordingSet::new(recordings, SYNTH_RATE_HZ)
}

/// Number of windows per subject, useful in reports.
pub fn windows_per_subject(windows: &[SignalWindow]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for w in windows {
        *m.entry(w.subject.clone()).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn two_row_file() {
        let f = write_tmp("subject,label,x,y,z\na,walk,1,2,3\na,walk,4,5,6\n");
        let rs = load_csv(f.path(), 50.0).unwrap();
        assert_eq!(rs.recordings().len(), 1);
        assert_eq!(rs.recordings()[0].samples, vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
    }

    #[test]
    fn header_only_is_empty() {
        let f = write_tmp("subject,label,x,y,z\n");
        assert!(matches!(load_csv(f.path(), 50.0), Err(Error::EmptyFile(_))));
    }

    #[test]
    fn empty_labels_are_unlabeled() {
        let mut text = String::from("subject,label,x,y,z\n");
        for i in 0..130 {
            text.push_str(&format!("a,,{i},0,0\n"));
        }
        let rs = load_csv(write_tmp(&text).path(), 50.0).unwrap();
        let w = window(&rs, WINDOW_LEN, 64).unwrap();
        assert!(w.label_map.is_empty());
        assert!(w.windows.iter().all(|w| w.label.is_none()));
    }

    #[test]
    fn malformed_rows() {
        let f = write_tmp("subject,label,x,y,z\na,walk,1,2\n");
        assert!(matches!(load_csv(f.path(), 50.0), Err(Error::MalformedRow { line: 2, .. })));
        let f = write_tmp("subject,label,x,y,z\na,walk,1,2,3\na,walk,1,zz,3\n");
        assert!(matches!(load_csv(f.path(), 50.0), Err(Error::MalformedRow { line: 3, .. })));
    }

    #[test]
    fn non_contiguous_runs_are_separate_recordings() {
        let f = write_tmp("subject,label,x,y,z\na,w,1,1,1\na,r,2,2,2\na,w,3,3,3\n");
        let rs = load_csv(f.path(), 50.0).unwrap();
        assert_eq!(rs.recordings().len(), 3);
    }

    #[test]
    fn window_counts() {
        let rec = |len: usize| Recording {
            subject: "a".into(),
            label: "w".into(),
            samples: (0..len).map(|i| [i as f64; 3]).collect(),
        };
        let rs = RecordingSet::new(vec![rec(128), rec(256), rec(100)], 50.0).unwrap();
        let w = window(&rs, 128, 64).unwrap();
        assert_eq!(w.skipped_recordings, 1);
        let offsets: Vec<_> = w.windows.iter().map(|w| (w.recording, w.source_offset)).collect();
        assert_eq!(offsets, vec![(0, 0), (1, 0), (1, 64), (1, 128)]);
        assert!(matches!(window(&rs, 128, 0), Err(Error::InvalidParams(_))));
        assert!(matches!(window(&rs, 0, 4), Err(Error::InvalidParams(_))));
    }

    #[test]
    fn labels_are_lexicographic() {
        let m = LabelMap::from_labels(["walk", "jog", "sit", "jog"]);
        assert_eq!(m.labels(), &["jog", "sit", "walk"]);
        assert_eq!(m.index("sit"), Some(1));
        assert_eq!(m.index("run"), None);
    }

    #[test]
    fn synth_bounds_and_rate() {
        let classes = vec![ClassSpec { name: "a".into(), frequency_hz: 1.0, amplitude: 1.0, offset: 2.0 }];
        let rs = synth_dataset(2, &classes, 2, 0.0, 1).unwrap();
        assert_eq!(rs.sample_rate_hz(), 50.0);
        for r in rs.recordings() {
            for s in &r.samples {
                assert!(s.iter().all(|&v| (1.0..=3.0).contains(&v)));
            }
        }
    }

    #[test]
    fn synth_rejects_duplicate_frequency() {
        let classes = sinusoid_classes(&[2.0, 2.0], 1.0);
        assert!(matches!(synth_dataset(2, &classes, 1, 0.0, 1), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn synth_seed_determinism() {
        let classes = sinusoid_classes(&[1.0, 3.0], 1.0);
        let a = synth_dataset(3, &classes, 1, 0.1, 5).unwrap();
        let b = synth_dataset(3, &classes, 1, 0.1, 5).unwrap();
        let c = synth_dataset(3, &classes, 1, 0.1, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn scheme2_counts() {
        let windows: Vec<SignalWindow> = (0..10)
            .map(|s| SignalWindow {
                values: vec![0.0; 3],
                subject: format!("s{s}"),
                label: None,
                recording: s,
                source_offset: 0,
            })
            .collect();
        let plan = make_splits(&windows, Scheme::Scheme2, 3, 0.2, 0.2).unwrap();
        assert_eq!(plan.folds.len(), 1);
        let f = &plan.folds[0];
        assert_eq!(f.test.len(), 2);
        assert_eq!(f.train.len() + f.val.len(), 8);
        assert!(matches!(
            make_splits(&windows[..4], Scheme::Scheme1, 0, 0.2, 0.2),
            Err(Error::TooFewSubjects { needed: 5, found: 4 })
        ));
        assert!(matches!(
            make_splits(&windows[..1], Scheme::Scheme2, 0, 0.2, 0.2),
            Err(Error::TooFewSubjects { .. })
        ));
    }
}
