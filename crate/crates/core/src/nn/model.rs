//! Encoders, MLP heads and architecture construction.

use std::fmt;
use std::str::FromStr;

use super::layers::{Conv1d, Conv2d, ConvLayer, Dense};
use super::{join, relu_inplace, softmax, Module, ParamKind, Precision, Tensor};
use crate::dataio::{CHANNELS, WINDOW_LEN};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::wavelet::SCALOGRAM_SIZE;

pub const EMBED_DIM: usize = 96;
pub const HAR_HIDDEN: usize = 256;
pub const FUSION_HIDDEN: usize = 64;

/// Stack of valid convolutions, each followed by ReLU, then a global max-pool.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvEncoder<L> {
    pub layers: Vec<L>,
    /// Spatial dims of the expected input (channels excluded).
    pub input_dims: Vec<usize>,
    pub precision: Precision,
}

pub type SignalEncoder = ConvEncoder<Conv1d>;
pub type ScalogramEncoder = ConvEncoder<Conv2d>;

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    /// Input of each layer: the raw input, then post-ReLU maps.
    pub inputs: Vec<Vec<f64>>,
    pub dims: Vec<Vec<usize>>,
    /// Flat spatial position of the maximum per output channel.
    pub argmax: Vec<usize>,
    pub pooled: Vec<f64>,
}

impl SignalEncoder {
    /// Kernels 12/8/8, filters 32/64/96 over a (128, 3) window.
    pub fn standard() -> Self {
        Self::signal(WINDOW_LEN, CHANNELS, &[(12, 32), (8, 64), (8, EMBED_DIM)])
    }

    /// Custom 1-D stack from `(kernel, filters)` pairs.
    pub fn signal(len: usize, in_ch: usize, spec: &[(usize, usize)]) -> Self {
        let mut c = in_ch;
        let layers = spec
            .iter()
            .map(|&(k, f)| {
                let l = Conv1d::new(k, c, f);
                c = f;
                l
            })
            .collect();
        Self {
            layers,
            input_dims: vec![len],
            precision: Precision::Double,
        }
    }
}

impl ScalogramEncoder {
    /// Kernels 8/4/4, filters 32/64/96 over a (128, 128, 3) scalogram.
    pub fn standard() -> Self {
        Self::scalogram(SCALOGRAM_SIZE, SCALOGRAM_SIZE, CHANNELS, &[(8, 32), (4, 64), (4, EMBED_DIM)])
    }

    pub fn scalogram(height: usize, width: usize, in_ch: usize, spec: &[(usize, usize)]) -> Self {
        let mut c = in_ch;
        let layers = spec
            .iter()
            .map(|&(k, f)| {
                let l = Conv2d::new(k, c, f);
                c = f;
                l
            })
            .collect();
        Self {
            layers,
            input_dims: vec![height, width],
            precision: Precision::Double,
        }
    }
}

impl<L: ConvLayer> ConvEncoder<L> {
    pub fn in_channels(&self) -> usize {
        self.layers[0].in_channels()
    }

    pub fn embed_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels())
    }

    pub fn input_len(&self) -> usize {
        self.input_dims.iter().product::<usize>() * self.in_channels()
    }

    /// Spatial dims at the output of every layer.
    pub fn layer_dims(&self) -> Vec<Vec<usize>> {
        let mut dims = self.input_dims.clone();
        self.layers
            .iter()
            .map(|l| {
                dims = l.output_dims(&dims).expect("input too small for encoder");
                dims.clone()
            })
            .collect()
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_len() {
            let mut shape: Vec<usize> = self.input_dims.clone();
            shape.push(self.in_channels());
            return Err(Error::bad_shape(format!("{shape:?} ({} values)", self.input_len()), format!("{} values", input.len())));
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, EncoderTrace)> {
        self.forward_from(0, input)
    }

    /// Spatial dims of the input of layer `l`.
    fn dims_into(&self, l: usize) -> Vec<usize> {
        let mut dims = self.input_dims.clone();
        for layer in &self.layers[..l] {
            dims = layer.output_dims(&dims).expect("input too small for encoder");
        }
        dims
    }

    /// Post-ReLU activation feeding layer `upto` (the input itself for 0).
    pub fn prefix(&self, input: &[f64], upto: usize) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut x = input.to_vec();
        let mut dims = self.input_dims.clone();
        for layer in &self.layers[..upto] {
            let mut y = layer.forward(&x, &dims, self.precision);
            relu_inplace(&mut y);
            dims = layer.output_dims(&dims).expect("checked by input length");
            x = y;
        }
        Ok(x)
    }

    /// Forward pass starting at layer `start` from its input activation.
    /// Trace entries of earlier layers are left empty.
    pub fn forward_from(&self, start: usize, x0: &[f64]) -> Result<(Vec<f64>, EncoderTrace)> {
        if start == 0 {
            self.check_input(x0)?;
        } else {
            let dims = self.dims_into(start);
            let want = dims.iter().product::<usize>() * self.layers[start].in_channels();
            if x0.len() != want {
                return Err(Error::bad_shape(format!("{want} values"), format!("{} values", x0.len())));
            }
        }
        let mut trace = EncoderTrace {
            inputs: Vec::with_capacity(self.layers.len()),
            dims: Vec::with_capacity(self.layers.len()),
            argmax: Vec::new(),
            pooled: Vec::new(),
        };
        let mut dims = self.input_dims.clone();
        for layer in &self.layers[..start] {
            trace.inputs.push(Vec::new());
            let next = layer.output_dims(&dims).expect("input too small for encoder");
            trace.dims.push(std::mem::replace(&mut dims, next));
        }
        let mut x = x0.to_vec();
        for layer in &self.layers[start..] {
            let mut y = layer.forward(&x, &dims, self.precision);
            relu_inplace(&mut y);
            let next = layer.output_dims(&dims).expect("checked by input length");
            trace.inputs.push(std::mem::replace(&mut x, y));
            trace.dims.push(std::mem::replace(&mut dims, next));
        }
        let (pooled, argmax) = global_max_pool(&x, self.embed_dim());
        trace.argmax = argmax;
        trace.pooled = pooled.clone();
        Ok((pooled, trace))
    }

    /// Forward pass without keeping a trace.
    pub fn embed(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut x = input.to_vec();
        let mut dims = self.input_dims.clone();
        for layer in &self.layers {
            let mut y = layer.forward(&x, &dims, self.precision);
            relu_inplace(&mut y);
            dims = layer.output_dims(&dims).expect("checked by input length");
            x = y;
        }
        Ok(global_max_pool(&x, self.embed_dim()).0)
    }

    /// Accumulate gradients of layers `trainable_from..` into `grad`.
    pub fn backward(&self, trace: &EncoderTrace, d_embed: &[f64], grad: &mut Self, trainable_from: usize) {
        let n = self.layers.len();
        if trainable_from >= n {
            return;
        }
        let c = self.embed_dim();
        let last_dims = self.layers[n - 1].output_dims(&trace.dims[n - 1]).expect("trace dims");
        let mut d = vec![0.0; last_dims.iter().product::<usize>() * c];
        for o in 0..c {
            if trace.pooled[o] > 0.0 {
                d[trace.argmax[o] * c + o] = d_embed[o];
            }
        }
        for l in (trainable_from..n).rev() {
            let input = &trace.inputs[l];
            if l > trainable_from {
                let mut dx = vec![0.0; input.len()];
                self.layers[l].backward(input, &trace.dims[l], &d, &mut grad.layers[l], Some(&mut dx));
                for (g, &a) in dx.iter_mut().zip(input) {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                }
                d = dx;
            } else {
                self.layers[l].backward(input, &trace.dims[l], &d, &mut grad.layers[l], None);
            }
        }
    }
}

/// Per-channel maximum over all positions; ties resolve to the first position.
fn global_max_pool(x: &[f64], c: usize) -> (Vec<f64>, Vec<usize>) {
    let mut best = vec![f64::NEG_INFINITY; c];
    let mut arg = vec![0; c];
    for (p, row) in x.chunks_exact(c).enumerate() {
        for (o, &v) in row.iter().enumerate() {
            if v > best[o] {
                best[o] = v;
                arg[o] = p;
            }
        }
    }
    (best, arg)
}

impl<L: ConvLayer> Module for ConvEncoder<L> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("conv{}", i + 1)), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("conv{}", i + 1)), f);
        }
    }
}

/// Two dense layers with a ReLU between them and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub dense1: Dense,
    pub dense2: Dense,
}

#[derive(Debug, Clone)]
pub struct MlpTrace {
    pub input: Vec<f64>,
    pub hidden: Vec<f64>,
}

impl Mlp {
    pub fn new(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            dense1: Dense::new(input, hidden),
            dense2: Dense::new(hidden, output),
        }
    }

    pub fn projection() -> Self {
        Self::new(EMBED_DIM, EMBED_DIM, EMBED_DIM)
    }

    pub fn predictor() -> Self {
        Self::new(EMBED_DIM, EMBED_DIM, EMBED_DIM)
    }

    pub fn har(classes: usize) -> Self {
        Self::new(EMBED_DIM, HAR_HIDDEN, classes)
    }

    pub fn fusion(classes: usize) -> Self {
        Self::new(2 * EMBED_DIM, FUSION_HIDDEN, classes)
    }

    pub fn in_dim(&self) -> usize {
        self.dense1.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.dense2.out_dim()
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, MlpTrace)> {
        if x.len() != self.in_dim() {
            return Err(Error::bad_shape(self.in_dim(), x.len()));
        }
        let mut h = self.dense1.forward(x);
        relu_inplace(&mut h);
        let out = self.dense2.forward(&h);
        Ok((
            out,
            MlpTrace {
                input: x.to_vec(),
                hidden: h,
            },
        ))
    }

    /// Softmax over the linear output.
    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.forward(x)?.0))
    }

    /// Accumulates parameter gradients; returns the input gradient if asked.
    pub fn backward(&self, trace: &MlpTrace, d_out: &[f64], grad: &mut Mlp, want_input: bool) -> Option<Vec<f64>> {
        let mut dh = vec![0.0; trace.hidden.len()];
        self.dense2.backward(&trace.hidden, d_out, &mut grad.dense2, Some(&mut dh));
        for (g, &h) in dh.iter_mut().zip(&trace.hidden) {
            if h <= 0.0 {
                *g = 0.0;
            }
        }
        if want_input {
            let mut dx = vec![0.0; trace.input.len()];
            self.dense1.backward(&trace.input, &dh, &mut grad.dense1, Some(&mut dx));
            Some(dx)
        } else {
            self.dense1.backward(&trace.input, &dh, &mut grad.dense1, None);
            None
        }
    }
}

impl Module for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        self.dense1.visit(&join(prefix, "dense1"), f);
        self.dense2.visit(&join(prefix, "dense2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        self.dense1.visit_mut(&join(prefix, "dense1"), f);
        self.dense2.visit_mut(&join(prefix, "dense2"), f);
    }
}

/// Named architectures accepted by [`init_params`].
///
/// String forms: `signal-encoder`, `scalogram-encoder`, `projection-head`,
/// `predictor-head`, `har-head/<classes>`, `fusion-head/<classes>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    SignalEncoder,
    ScalogramEncoder,
    ProjectionHead,
    PredictorHead,
    HarHead { classes: usize },
    FusionHead { classes: usize },
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownArch(s.to_string());
        let classes = |rest: &str| -> Result<usize> {
            match rest.parse::<usize>() {
                Ok(c) if c >= 2 => Ok(c),
                _ => Err(unknown()),
            }
        };
        Ok(match s {
            "signal-encoder" => Architecture::SignalEncoder,
            "scalogram-encoder" => Architecture::ScalogramEncoder,
            "projection-head" => Architecture::ProjectionHead,
            "predictor-head" => Architecture::PredictorHead,
            _ => {
                if let Some(rest) = s.strip_prefix("har-head/") {
                    Architecture::HarHead { classes: classes(rest)? }
                } else if let Some(rest) = s.strip_prefix("fusion-head/") {
                    Architecture::FusionHead { classes: classes(rest)? }
                } else {
                    return Err(unknown());
                }
            }
        })
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::SignalEncoder => write!(f, "signal-encoder"),
            Architecture::ScalogramEncoder => write!(f, "scalogram-encoder"),
            Architecture::ProjectionHead => write!(f, "projection-head"),
            Architecture::PredictorHead => write!(f, "predictor-head"),
            Architecture::HarHead { classes } => write!(f, "har-head/{classes}"),
            Architecture::FusionHead { classes } => write!(f, "fusion-head/{classes}"),
        }
    }
}

/// A freshly initialized network of one of the named architectures.
#[derive(Debug, Clone, PartialEq)]
pub enum Network {
    Signal(SignalEncoder),
    Scalogram(ScalogramEncoder),
    Head(Mlp),
}

impl Module for Network {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        match self {
            Network::Signal(m) => m.visit(prefix, f),
            Network::Scalogram(m) => m.visit(prefix, f),
            Network::Head(m) => m.visit(prefix, f),
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        match self {
            Network::Signal(m) => m.visit_mut(prefix, f),
            Network::Scalogram(m) => m.visit_mut(prefix, f),
            Network::Head(m) => m.visit_mut(prefix, f),
        }
    }
}

/// Glorot-uniform weights, zero biases, deterministic per seed.
pub fn init_params(arch: &str, seed: u64) -> Result<Network> {
    let arch: Architecture = arch.parse()?;
    let mut net = match arch {
        Architecture::SignalEncoder => Network::Signal(SignalEncoder::standard()),
        Architecture::ScalogramEncoder => Network::Scalogram(ScalogramEncoder::standard()),
        Architecture::ProjectionHead => Network::Head(Mlp::projection()),
        Architecture::PredictorHead => Network::Head(Mlp::predictor()),
        Architecture::HarHead { classes } => Network::Head(Mlp::har(classes)),
        Architecture::FusionHead { classes } => Network::Head(Mlp::fusion(classes)),
    };
    net.init(&RngStream::new(seed, 0x1417));
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::glorot_limit;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut r = RngStream::new(seed, 5).rng();
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn scalogram_encoder_dims() {
        let e = ScalogramEncoder::standard();
        assert_eq!(e.layer_dims(), vec![vec![121, 121], vec![118, 118], vec![115, 115]]);
        let s = SignalEncoder::standard();
        assert_eq!(s.layer_dims(), vec![vec![117], vec![110], vec![103]]);
    }

    #[test]
    fn zero_weights_give_zero_embedding() {
        let e = SignalEncoder::standard();
        let (z, _) = e.forward(&random(128 * 3, 1)).unwrap();
        assert_eq!(z, vec![0.0; 96]);
    }

    #[test]
    fn wrong_input_length_is_bad_shape() {
        let e = SignalEncoder::standard();
        assert!(matches!(e.forward(&[0.0; 10]), Err(Error::BadShape { .. })));
        let h = Mlp::projection();
        assert!(matches!(h.forward(&[0.0; 3]), Err(Error::BadShape { .. })));
    }

    #[test]
    fn identity_projection_passes_nonnegative_input() {
        let mut h = Mlp::new(4, 4, 4);
        for i in 0..4 {
            h.dense1.weight.data[i * 4 + i] = 1.0;
            h.dense2.weight.data[i * 4 + i] = 1.0;
        }
        let x = vec![0.0, 1.5, 2.0, 0.25];
        assert_eq!(h.forward(&x).unwrap().0, x);
    }

    #[test]
    fn har_head_probabilities_are_normalized_and_shift_invariant() {
        let Network::Head(h) = init_params("har-head/4", 3).unwrap() else { panic!() };
        let p = h.probabilities(&random(96, 2)).unwrap();
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        assert!(p.iter().all(|&v| v > 0.0));
        let logits = random(4, 3);
        let shifted: Vec<f64> = logits.iter().map(|v| v + 7.5).collect();
        for (a, b) in softmax(&logits).iter().zip(softmax(&shifted)) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        assert_eq!(softmax(&[0.0; 4]), vec![0.25; 4]);
    }

    #[test]
    fn init_params_is_deterministic_and_bounded() {
        let a = init_params("signal-encoder", 1).unwrap();
        let b = init_params("signal-encoder", 1).unwrap();
        let c = init_params("signal-encoder", 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.flatten(), c.flatten());
        a.visit("", &mut |name, kind, t| match kind {
            ParamKind::Bias => assert!(t.data.iter().all(|&v| v == 0.0), "{name}"),
            _ => {
                let lim = glorot_limit(&t.shape);
                assert!(t.data.iter().all(|v| v.abs() <= lim), "{name}");
            }
        });
        assert!(matches!(init_params("resnet", 1), Err(Error::UnknownArch(_))));
        assert!(matches!(init_params("har-head/1", 1), Err(Error::UnknownArch(_))));
    }

    #[test]
    fn forward_from_matches_full_forward() {
        let mut e = SignalEncoder::signal(20, 3, &[(4, 5), (3, 6), (2, 4)]);
        e.init(&RngStream::new(4, 4));
        let x = random(60, 9);
        let (full, ft) = e.forward(&x).unwrap();
        let mid = e.prefix(&x, 2).unwrap();
        let (part, pt) = e.forward_from(2, &mid).unwrap();
        assert_eq!(full, part);
        assert_eq!(ft.argmax, pt.argmax);
        assert_eq!(ft.inputs[2], pt.inputs[2]);
        assert_eq!(e.embed(&x).unwrap(), full);
    }

    #[test]
    fn parameter_names_follow_layers() {
        let e = SignalEncoder::standard();
        let mut names = Vec::new();
        e.visit("enc", &mut |n, _, _| names.push(n.to_string()));
        assert_eq!(names[0], "enc.conv1.weight");
        assert_eq!(names.len(), 6);
        assert_eq!(e.param_count(), 12 * 3 * 32 + 32 + 8 * 32 * 64 + 64 + 8 * 64 * 96 + 96);
    }
}
