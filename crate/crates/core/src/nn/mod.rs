//! Minimal neural-network substrate: convolution and dense layers with
//! hand-written backward passes, the two encoders, MLP heads, Adam,
//! finite-difference gradient checking and checkpoint files.
//!
//! Parameters and gradients are `f64`. Convolution forward passes can run
//! their matrix products in `f32` ([`Precision::Single`]) to halve training
//! time; backward passes are always `f64`.

mod adam;
mod checkpoint;
mod gradcheck;
mod layers;
mod model;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, EpochRecord, Manifest, ModelCheckpoint, TensorEntry, CHECKPOINT_SCHEMA_VERSION,
};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use layers::{Conv1d, Conv2d, ConvLayer, Dense};
pub use model::{
    init_params, Architecture, ConvEncoder, EncoderTrace, Mlp, MlpTrace, Network, ScalogramEncoder, SignalEncoder,
    EMBED_DIM, HAR_HIDDEN, FUSION_HIDDEN,
};

use serde::{Deserialize, Serialize};

use crate::rng::RngStream;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Glorot-uniform fill for a weight of shape `[out, receptive.., in]`.
    pub fn fill_glorot(&mut self, rng: &RngStream) {
        use rand::Rng;
        let limit = glorot_limit(&self.shape);
        let mut r = rng.rng();
        for v in &mut self.data {
            *v = r.random_range(-limit..=limit);
        }
    }
}

/// `√(6 / (fan_in + fan_out))` with fans from a `[out, receptive.., in]` shape.
pub fn glorot_limit(shape: &[usize]) -> f64 {
    let out = shape[0];
    let inp = *shape.last().unwrap_or(&1);
    let receptive: usize = if shape.len() > 2 { shape[1..shape.len() - 1].iter().product() } else { 1 };
    (6.0 / (receptive * (inp + out)) as f64).sqrt()
}

/// Role of a parameter tensor; L2 regularization applies to convolution weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    Weight,
    Bias,
}

/// A collection of named parameter tensors visited in a fixed order.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, t| n += t.numel());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit("", &mut |_, _, t| out.extend_from_slice(&t.data));
        out
    }

    /// Overwrite every parameter from a flat vector in visit order.
    fn load_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.visit_mut("", &mut |_, _, t| {
            let n = t.numel();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        });
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    fn zero(&mut self) {
        self.visit_mut("", &mut |_, _, t| t.data.fill(0.0));
    }

    /// Initialize weights Glorot-uniform and biases to zero; each tensor draws
    /// from its own sub-stream of `rng`.
    fn init(&mut self, rng: &RngStream) {
        let mut k = 0u64;
        self.visit_mut("", &mut |_, kind, t| {
            match kind {
                ParamKind::Bias => t.data.fill(0.0),
                _ => t.fill_glorot(&rng.child(k)),
            }
            k += 1;
        });
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Structural clone with every parameter zeroed; used as a gradient buffer.
pub fn zeros_like<M: Module + Clone>(m: &M) -> M {
    let mut z = m.clone();
    z.zero();
    z
}

/// `acc += other`, parameter by parameter.
pub fn accumulate<M: Module>(acc: &mut M, other: &M) {
    let flat = other.flatten();
    let mut off = 0;
    acc.visit_mut("", &mut |_, _, t| {
        let n = t.numel();
        for (a, b) in t.data.iter_mut().zip(&flat[off..off + n]) {
            *a += b;
        }
        off += n;
    });
}

pub fn scale<M: Module>(m: &mut M, factor: f64) {
    m.visit_mut("", &mut |_, _, t| t.data.iter_mut().for_each(|v| *v *= factor));
}

/// Precision of convolution matrix products.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    #[serde(rename = "f64")]
    Double,
    #[serde(rename = "f32")]
    Single,
}

pub(crate) fn relu_inplace(v: &mut [f64]) {
    v.iter_mut().for_each(|x| {
        if *x < 0.0 {
            *x = 0.0
        }
    });
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}
