use std::collections::BTreeMap;
use std::sync::OnceLock;

use tfcl::config::ExperimentConfig;
use tfcl::contrastive::{pretrain, Featurizer, PretrainConfig, Stream};
use tfcl::dataio::{make_splits, sinusoid_classes, synth_dataset, window, Fold, Scheme, SignalWindow, Windowed, WINDOW_LEN};
use tfcl::downstream::{argmax, finetune, load_encoder, FinetuneConfig};
use tfcl::eval::{export_embeddings, read_embeddings, run_scheme, transfer_protocol};
use tfcl::nn::{ModelCheckpoint, Precision};
use tfcl::wavelet::default_scale_grid;

const CONFIG: &str = r#"
seed = 2
scheme = "scheme1"
fusion = "signal-only"
precision = "f32"
[data]
stride = 64
[data.synth]
num_subjects = 10
windows_per_subject_class = 3
noise_std = 0.3
seed = 4
classes = [{ name = "slow", frequency_hz = 2.0, amplitude = 1.0 },
           { name = "mid", frequency_hz = 5.0, amplitude = 1.0 },
           { name = "fast", frequency_hz = 11.0, amplitude = 1.0 }]
[pretrain]
batch_size = 32
signal_epochs = 3
[finetune]
signal_epochs = 15
batch_size = 32
"#;

fn experiment() -> ExperimentConfig {
    ExperimentConfig::from_toml(CONFIG, &[]).unwrap()
}

fn data() -> &'static Windowed {
    static DATA: OnceLock<Windowed> = OnceLock::new();
    DATA.get_or_init(|| {
        let rs = experiment().data.source().load(std::path::Path::new(".")).unwrap();
        window(&rs, WINDOW_LEN, 64).unwrap()
    })
}

fn split() -> Fold {
    make_splits(&data().windows, Scheme::Scheme2, 7, 0.2, 0.3).unwrap().folds.remove(0)
}

/// Signal encoder pretrained on the training subjects of [`split`].
fn pretrained() -> &'static ModelCheckpoint {
    static CK: OnceLock<ModelCheckpoint> = OnceLock::new();
    CK.get_or_init(|| {
        let mut cfg = PretrainConfig::new(Stream::Signal, default_scale_grid(50.0).unwrap(), 3);
        cfg.batch_size = 32;
        cfg.epochs = 10;
        cfg.precision = Precision::Single;
        pretrain(&cfg, &Fold::select(&split().train, &data().windows), None).unwrap()
    })
}

#[test]
fn finetuned_signal_model_generalizes_to_new_subjects() {
    let fold = split();
    let (train, val, test) = (
        Fold::select(&fold.train, &data().windows),
        Fold::select(&fold.val, &data().windows),
        Fold::select(&fold.test, &data().windows),
    );
    let mut cfg = FinetuneConfig::new(Stream::Signal, 5);
    cfg.epochs = 30;
    cfg.batch_size = 32;
    cfg.precision = Precision::Single;
    let (model, report) = finetune(pretrained(), &train, &val, &data().label_map, &cfg, None).unwrap();
    assert!(report.best_epoch < report.epochs.len());
    let scores = model.predict_batch(&test).unwrap();
    let correct = scores.iter().zip(&test).filter(|(p, w)| Some(argmax(p)) == w.label).count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc > 0.9, "held-out accuracy {acc}");
}

#[test]
fn scheme1_report_aggregates_its_folds() {
    let exp = experiment();
    let plan = make_splits(&data().windows, exp.scheme, exp.seed, exp.data.val_fraction, exp.data.test_fraction).unwrap();
    assert_eq!(plan.folds.len(), 5);
    let report = run_scheme(&plan, data(), &exp, None).unwrap();
    assert_eq!(report.folds.len(), 5);
    let n = report.folds.len() as f64;
    let mean = |f: &dyn Fn(&tfcl::eval::FoldReport) -> f64| report.folds.iter().map(f).sum::<f64>() / n;
    assert!((report.aggregate.fused.mean.weighted_f1 - mean(&|r| r.fused.weighted_f1)).abs() <= 1e-12);
    assert!((report.aggregate.fused.mean.accuracy - mean(&|r| r.fused.accuracy)).abs() <= 1e-12);
    let signal = &report.aggregate.streams["signal"];
    assert!((signal.mean.weighted_f1 - mean(&|r| r.streams["signal"].weighted_f1)).abs() <= 1e-12);
    let tested: usize = report.folds.iter().map(|f| f.test_windows).sum();
    assert_eq!(tested, data().windows.len());
}

fn nearest_centroid(train: &[(String, Vec<f64>)], test: &[(String, Vec<f64>)]) -> f64 {
    let mut sums: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for (label, e) in train {
        let entry = sums.entry(label).or_insert_with(|| (vec![0.0; e.len()], 0));
        entry.0.iter_mut().zip(e).for_each(|(a, b)| *a += b);
        entry.1 += 1;
    }
    let centroids: Vec<(&str, Vec<f64>)> =
        sums.into_iter().map(|(l, (s, n))| (l, s.into_iter().map(|v| v / n as f64).collect())).collect();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let hits = test
        .iter()
        .filter(|(label, e)| {
            let best = centroids.iter().min_by(|a, b| dist(&a.1, e).total_cmp(&dist(&b.1, e))).unwrap();
            best.0 == label
        })
        .count();
    hits as f64 / test.len() as f64
}

#[test]
fn exported_embeddings_round_trip() {
    let ck = pretrained();
    let encoder = load_encoder(ck).unwrap();
    let featurizer = Featurizer::new(Stream::Signal, &default_scale_grid(50.0).unwrap()).unwrap();
    let refs: Vec<&SignalWindow> = data().windows.iter().collect();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    export_embeddings(&encoder, &featurizer, &refs, &data().label_map, &a).unwrap();
    export_embeddings(&encoder, &featurizer, &refs, &data().label_map, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let rows = read_embeddings(&a).unwrap();
    assert_eq!(rows.len(), refs.len());
    let fold = split();
    let mut from_file = (Vec::new(), Vec::new());
    let mut in_memory = (Vec::new(), Vec::new());
    for (row, w) in rows.iter().zip(&refs) {
        assert_eq!(row.subject, w.subject);
        assert_eq!(row.stream, "signal");
        let memory = encoder.embed(&featurizer.input(w).unwrap()).unwrap();
        assert_eq!(row.embedding, memory);
        let label = data().label_map.name(w.label.unwrap()).unwrap().to_string();
        assert_eq!(row.label, label);
        let (f, m) = if fold.test.contains(&w.subject) {
            (&mut from_file.1, &mut in_memory.1)
        } else {
            (&mut from_file.0, &mut in_memory.0)
        };
        f.push((row.label.clone(), row.embedding.clone()));
        m.push((label, memory));
    }
    let probe = nearest_centroid(&from_file.0, &from_file.1);
    assert_eq!(probe, nearest_centroid(&in_memory.0, &in_memory.1));
    assert!(probe > 1.0 / 3.0, "probe accuracy {probe}");
}

#[test]
fn transfer_reuses_one_encoder_across_folds() {
    let exp = experiment();
    let mut classes = sinusoid_classes(&[3.0, 7.0, 13.0], 1.0);
    classes.iter_mut().zip(["p", "q", "r"]).for_each(|(c, n)| c.name = n.into());
    let source = window(&synth_dataset(6, &classes, 3, 0.3, 1).unwrap(), WINDOW_LEN, 64).unwrap();
    assert!(source.label_map.labels().iter().all(|l| data().label_map.index(l).is_none()));
    let plan = make_splits(&data().windows, exp.scheme, exp.seed, exp.data.val_fraction, exp.data.test_fraction).unwrap();
    let report = transfer_protocol(&source.windows, data(), &plan, &exp).unwrap();
    assert!(report.provenance.transfer);
    let ids: Vec<&String> = report.folds.iter().map(|f| &f.checkpoints["signal"]).collect();
    assert!(ids.windows(2).all(|p| p[0] == p[1]), "{ids:?}");
    assert!(report.aggregate.fused.mean.accuracy > 2.0 / 3.0);
}
