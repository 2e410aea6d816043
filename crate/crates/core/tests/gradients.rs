use rand::Rng;
use tfcl::contrastive::{Encoder, Objective, PretrainModel};
use tfcl::nn::{grad_check, GradCheckOptions, Module, Precision, ScalogramEncoder, SignalEncoder};
use tfcl::rng::RngStream;

fn random(n: usize, stream: &RngStream) -> Vec<f64> {
    let mut r = stream.rng();
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn tiny_signal() -> Encoder {
    Encoder::Signal(SignalEncoder::signal(16, 3, &[(4, 6), (3, 5)]))
}

fn tiny_scalogram() -> Encoder {
    Encoder::Scalogram(ScalogramEncoder::scalogram(7, 8, 3, &[(3, 4), (2, 5)]))
}

fn views(input_len: usize, pairs: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let s = RngStream::new(seed, 1);
    (0..pairs)
        .map(|k| (random(input_len, &s.derive(&[k as u64, 0])), random(input_len, &s.derive(&[k as u64, 1]))))
        .collect()
}

fn check(encoder: Encoder, input_len: usize, objective: Objective, seed: u64) -> f64 {
    let mut model = PretrainModel::from_parts(encoder, objective);
    model.init(&RngStream::new(seed, 2));
    let batch = views(input_len, 3, seed);
    let analytic = model.batch_loss(&batch, 0.5).unwrap().grad.flatten();
    let params = model.flatten();
    // Stop-gradient targets stay at their unperturbed values.
    let targets = model.latents(&batch).unwrap();
    let loss = |p: &[f64]| {
        let mut m = model.clone();
        m.load_flat(p);
        m.batch_loss_with_targets(&batch, 0.5, Some(&targets)).unwrap().loss
    };
    let opts = GradCheckOptions {
        coordinates: usize::MAX,
        step: 1e-5,
        floor: 1e-6,
        ..Default::default()
    };
    grad_check(loss, &params, &analytic, &opts).unwrap().max_rel_error
}

#[test]
fn signal_ntxent_gradients() {
    let e = check(tiny_signal(), 16 * 3, Objective::Ntxent, 11);
    assert!(e <= 1e-4, "max relative error {e}");
}

#[test]
fn signal_stopgrad_gradients() {
    let e = check(tiny_signal(), 16 * 3, Objective::Stopgrad, 12);
    assert!(e <= 1e-4, "max relative error {e}");
}

#[test]
fn scalogram_ntxent_gradients() {
    let e = check(tiny_scalogram(), 7 * 8 * 3, Objective::Ntxent, 13);
    assert!(e <= 1e-4, "max relative error {e}");
}

#[test]
fn scalogram_stopgrad_gradients() {
    let e = check(tiny_scalogram(), 7 * 8 * 3, Objective::Stopgrad, 14);
    assert!(e <= 1e-4, "max relative error {e}");
}

// Gradients from single-precision convolution products against
// double-precision central differences.
#[test]
fn single_precision_forward_within_relaxed_tolerance() {
    for (encoder, len) in [(tiny_signal(), 48), (tiny_scalogram(), 7 * 8 * 3)] {
        let mut model = PretrainModel::from_parts(encoder, Objective::Ntxent);
        model.init(&RngStream::new(5, 2));
        let batch = views(len, 3, 5);
        let mut single = model.clone();
        single.encoder.set_precision(Precision::Single);
        let analytic = single.batch_loss(&batch, 0.5).unwrap().grad.flatten();
        let params = model.flatten();
        let loss = |p: &[f64]| {
            let mut m = model.clone();
            m.load_flat(p);
            m.batch_loss(&batch, 0.5).unwrap().loss
        };
        let opts = GradCheckOptions {
            coordinates: usize::MAX,
            step: 1e-5,
            floor: 1e-6,
            ..Default::default()
        };
        let e = grad_check(loss, &params, &analytic, &opts).unwrap().max_rel_error;
        assert!(e <= 1e-2, "max relative error {e}");
    }
}

// The analytic gradient never flows into a detached target.
#[test]
fn detached_targets_receive_no_gradient() {
    let mut model = PretrainModel::from_parts(tiny_signal(), Objective::Stopgrad);
    model.init(&RngStream::new(8, 2));
    let batch = views(48, 2, 8);
    let targets = model.latents(&batch).unwrap();
    let base = model.batch_loss_with_targets(&batch, 0.5, Some(&targets)).unwrap().loss;
    let mut moved = targets.clone();
    moved[0].1[0] += 1e-3;
    let shifted = model.batch_loss_with_targets(&batch, 0.5, Some(&moved)).unwrap().loss;
    assert_ne!(base, shifted);
    let live = model.batch_loss(&batch, 0.5).unwrap();
    assert_eq!(live.loss, base);
}
