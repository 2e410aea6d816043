//! Stochastic views for the two contrastive learners.
//!
//! Temporal transforms act on `(128, 3)` signal windows, time-frequency
//! transforms act on `128×128×3` scalograms. Every transform draws from an
//! [`RngStream`], so a view is a pure function of `(input, spec, stream)`.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::{SignalWindow, CHANNELS, WINDOW_LEN};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::wavelet::{Scalogram, SCALOGRAM_SIZE};

fn default_noise_std() -> f64 {
    0.1
}
fn default_scale_mean() -> f64 {
    1.0
}
fn default_scale_std() -> f64 {
    0.2
}
fn default_segments() -> usize {
    4
}
fn default_knots() -> usize {
    4
}
fn default_warp_std() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TemporalSpec {
    /// Additive i.i.d. Gaussian noise.
    Noise {
        #[serde(default = "default_noise_std")]
        std: f64,
    },
    /// One Gaussian factor multiplying the whole window.
    Scale {
        #[serde(default = "default_scale_mean")]
        mean: f64,
        #[serde(default = "default_scale_std")]
        std: f64,
    },
    Negation,
    TimeFlip,
    ChannelShuffle,
    /// Contiguous time slices concatenated in a random order; the last slice
    /// absorbs the remainder.
    Permutation {
        #[serde(default = "default_segments")]
        segments: usize,
    },
    /// Uniform random axis, uniform angle in `[0, 2π)`.
    Rotation,
    /// Monotone cubic time remapping through perturbed interior knots.
    TimeWarp {
        #[serde(default = "default_knots")]
        knots: usize,
        #[serde(default = "default_warp_std")]
        std: f64,
    },
}

impl TemporalSpec {
    /// The eight transforms with their default parameters.
    pub fn all_defaults() -> Vec<TemporalSpec> {
        vec![
            TemporalSpec::Noise { std: default_noise_std() },
            TemporalSpec::Scale {
                mean: default_scale_mean(),
                std: default_scale_std(),
            },
            TemporalSpec::Negation,
            TemporalSpec::TimeFlip,
            TemporalSpec::ChannelShuffle,
            TemporalSpec::Permutation { segments: default_segments() },
            TemporalSpec::Rotation,
            TemporalSpec::TimeWarp {
                knots: default_knots(),
                std: default_warp_std(),
            },
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            TemporalSpec::Noise { .. } => "noise",
            TemporalSpec::Scale { .. } => "scale",
            TemporalSpec::Negation => "negation",
            TemporalSpec::TimeFlip => "time_flip",
            TemporalSpec::ChannelShuffle => "channel_shuffle",
            TemporalSpec::Permutation { .. } => "permutation",
            TemporalSpec::Rotation => "rotation",
            TemporalSpec::TimeWarp { .. } => "time_warp",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParams(format!("{}: {m}", self.name())));
        match *self {
            TemporalSpec::Noise { std } if !(std > 0.0) => bad("std must be positive"),
            TemporalSpec::Scale { std, .. } if !(std > 0.0) => bad("std must be positive"),
            TemporalSpec::Permutation { segments } if segments == 0 => bad("segments must be positive"),
            TemporalSpec::TimeWarp { knots, std } if knots == 0 || !(std > 0.0) => {
                bad("knots and std must be positive")
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimeFreqSpec {
    /// Brightness, contrast, saturation and hue jitter followed by random
    /// conversion to grayscale.
    ColorDistort {
        #[serde(default = "ColorJitter::brightness")]
        brightness: (f64, f64),
        #[serde(default = "ColorJitter::contrast")]
        contrast: (f64, f64),
        #[serde(default = "ColorJitter::saturation")]
        saturation: (f64, f64),
        #[serde(default = "ColorJitter::hue")]
        hue: (f64, f64),
        #[serde(default = "ColorJitter::grayscale_prob")]
        grayscale_prob: f64,
    },
    CropResize {
        #[serde(default = "CropDefaults::area")]
        area: (f64, f64),
        #[serde(default = "CropDefaults::aspect")]
        aspect: (f64, f64),
    },
    /// Reverse the time (width) axis.
    Flip,
}

struct ColorJitter;
impl ColorJitter {
    fn brightness() -> (f64, f64) {
        (-0.9, 0.9)
    }
    fn contrast() -> (f64, f64) {
        (0.1, 1.9)
    }
    fn saturation() -> (f64, f64) {
        (0.1, 1.9)
    }
    fn hue() -> (f64, f64) {
        (-0.3, 0.3)
    }
    fn grayscale_prob() -> f64 {
        0.2
    }
}

struct CropDefaults;
impl CropDefaults {
    fn area() -> (f64, f64) {
        (0.5, 1.0)
    }
    fn aspect() -> (f64, f64) {
        (3.0 / 4.0, 4.0 / 3.0)
    }
}

impl TimeFreqSpec {
    pub fn all_defaults() -> Vec<TimeFreqSpec> {
        vec![
            TimeFreqSpec::ColorDistort {
                brightness: ColorJitter::brightness(),
                contrast: ColorJitter::contrast(),
                saturation: ColorJitter::saturation(),
                hue: ColorJitter::hue(),
                grayscale_prob: ColorJitter::grayscale_prob(),
            },
            TimeFreqSpec::CropResize {
                area: CropDefaults::area(),
                aspect: CropDefaults::aspect(),
            },
            TimeFreqSpec::Flip,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            TimeFreqSpec::ColorDistort { .. } => "color_distort",
            TimeFreqSpec::CropResize { .. } => "crop_resize",
            TimeFreqSpec::Flip => "flip",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |(lo, hi): (f64, f64)| lo <= hi && lo.is_finite() && hi.is_finite();
        let ok = match *self {
            TimeFreqSpec::ColorDistort {
                brightness,
                contrast,
                saturation,
                hue,
                grayscale_prob,
            } => {
                [brightness, contrast, saturation, hue].into_iter().all(ordered)
                    && contrast.0 >= 0.0
                    && saturation.0 >= 0.0
                    && (0.0..=1.0).contains(&grayscale_prob)
            }
            TimeFreqSpec::CropResize { area, aspect } => {
                ordered(area) && area.0 > 0.0 && area.1 <= 1.0 && ordered(aspect) && aspect.0 > 0.0
            }
            TimeFreqSpec::Flip => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("{}: invalid ranges", self.name())))
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Reorder contiguous segments of `values` (rows of `width` entries).
/// Segment `k` has `rows / segments` rows except the last, which takes the rest.
pub fn permute_segments(values: &[f64], width: usize, order: &[usize]) -> Vec<f64> {
    let rows = values.len() / width;
    let n = order.len().clamp(1, rows.max(1));
    let base = rows / n;
    let bounds = |k: usize| (k * base, if k + 1 == n { rows } else { (k + 1) * base });
    order
        .iter()
        .flat_map(|&k| {
            let (lo, hi) = bounds(k);
            values[lo * width..hi * width].iter().copied()
        })
        .collect()
}

/// Rodrigues rotation matrix about a unit axis.
pub fn rotation_matrix(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let [x, y, z] = axis;
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
        [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
        [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
    ]
}

fn rotate_rows(values: &[f64], r: &[[f64; 3]; 3]) -> Vec<f64> {
    values
        .chunks_exact(3)
        .flat_map(|v| (0..3).map(move |i| r[i][0] * v[0] + r[i][1] * v[1] + r[i][2] * v[2]))
        .collect()
}

/// Monotone piecewise-cubic Hermite interpolant (Fritsch–Carlson slopes).
struct MonotoneCubic {
    xs: Vec<f64>,
    ys: Vec<f64>,
    slopes: Vec<f64>,
}

impl MonotoneCubic {
    fn new(xs: Vec<f64>, ys: Vec<f64>) -> Self {
        let n = xs.len();
        let h: Vec<f64> = xs.windows(2).map(|p| p[1] - p[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|k| (ys[k + 1] - ys[k]) / h[k]).collect();
        let mut slopes = vec![0.0; n];
        slopes[0] = delta[0];
        slopes[n - 1] = delta[n - 2];
        for k in 1..n - 1 {
            if delta[k - 1] * delta[k] > 0.0 {
                let w1 = 2.0 * h[k] + h[k - 1];
                let w2 = h[k] + 2.0 * h[k - 1];
                slopes[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k]);
            }
        }
        Self { xs, ys, slopes }
    }

    fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        let k = match self.xs.iter().rposition(|&xk| xk <= x) {
            Some(k) if k >= n - 1 => n - 2,
            Some(k) => k,
            None => 0,
        };
        let h = self.xs[k + 1] - self.xs[k];
        let t = (x - self.xs[k]) / h;
        let (t2, t3) = (t * t, t * t * t);
        (2.0 * t3 - 3.0 * t2 + 1.0) * self.ys[k]
            + (t3 - 2.0 * t2 + t) * h * self.slopes[k]
            + (-2.0 * t3 + 3.0 * t2) * self.ys[k + 1]
            + (t3 - t2) * h * self.slopes[k + 1]
    }
}

fn time_warp(values: &[f64], knots: usize, std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let len = values.len() / CHANNELS;
    let mut xs = vec![0.0];
    let mut ys: Vec<f64> = Vec::with_capacity(knots);
    let noise = Normal::new(0.0, std).expect("validated std");
    for k in 1..=knots {
        let u = k as f64 / (knots + 1) as f64;
        xs.push(u);
        ys.push((u + noise.sample(rng)).clamp(0.0, 1.0));
    }
    ys.sort_by(f64::total_cmp);
    xs.push(1.0);
    let ys: Vec<f64> = std::iter::once(0.0).chain(ys).chain(std::iter::once(1.0)).collect();
    let warp = MonotoneCubic::new(xs, ys);
    let last = (len - 1) as f64;
    let mut out = Vec::with_capacity(values.len());
    for i in 0..len {
        let src = (warp.eval(i as f64 / last) * last).clamp(0.0, last);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        let frac = src - i0 as f64;
        for c in 0..CHANNELS {
            let a = values[i0 * CHANNELS + c];
            let b = values[i1 * CHANNELS + c];
            out.push(a + (b - a) * frac);
        }
    }
    out
}

pub fn apply_temporal(w: &SignalWindow, spec: &TemporalSpec, rng: &RngStream) -> Result<SignalWindow> {
    w.check_shape(WINDOW_LEN)?;
    spec.validate()?;
    let mut rng = rng.rng();
    let v = &w.values;
    let values = match *spec {
        TemporalSpec::Noise { std } => {
            let n = Normal::new(0.0, std).expect("validated std");
            v.iter().map(|x| x + n.sample(&mut rng)).collect()
        }
        TemporalSpec::Scale { mean, std } => {
            let s = Normal::new(mean, std).expect("validated std").sample(&mut rng);
            v.iter().map(|x| x * s).collect()
        }
        TemporalSpec::Negation => v.iter().map(|x| -x).collect(),
        TemporalSpec::TimeFlip => v.chunks_exact(CHANNELS).rev().flatten().copied().collect(),
        TemporalSpec::ChannelShuffle => {
            let mut perm = [0usize, 1, 2];
            perm.shuffle(&mut rng);
            v.chunks_exact(CHANNELS).flat_map(|row| perm.map(|p| row[p])).collect()
        }
        TemporalSpec::Permutation { segments } => {
            let mut order: Vec<usize> = (0..segments.min(WINDOW_LEN)).collect();
            order.shuffle(&mut rng);
            permute_segments(v, CHANNELS, &order)
        }
        TemporalSpec::Rotation => {
            let axis = loop {
                let a: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
                let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
                if n > 1e-12 {
                    break a.map(|x| x / n);
                }
            };
            let angle = rng.random_range(0.0..2.0 * PI);
            rotate_rows(v, &rotation_matrix(axis, angle))
        }
        TemporalSpec::TimeWarp { knots, std } => time_warp(v, knots, std, &mut rng),
    };
    Ok(SignalWindow { values, ..w.clone() })
}

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[inline]
fn luma(px: &[f64]) -> f64 {
    LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2]
}

fn clamp_all(p: &mut [f64]) {
    p.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
}

/// Replace every channel of every pixel by its luma.
pub fn grayscale(s: &Scalogram) -> Scalogram {
    let mut out = s.clone();
    for px in out.pixels.chunks_exact_mut(CHANNELS) {
        let g = luma(px);
        px.fill(g);
    }
    clamp_all(&mut out.pixels);
    out
}

/// Hue rotation: rotate each RGB triplet about the gray axis by `2π·h`.
fn hue_matrix(h: f64) -> [[f64; 3]; 3] {
    let k = 1.0 / 3f64.sqrt();
    rotation_matrix([k, k, k], 2.0 * PI * h)
}

/// Full-size bilinear resize (corner-aligned) of the crop `rows × cols`
/// starting at `(top, left)`.
pub fn crop_resize(s: &Scalogram, top: usize, left: usize, rows: usize, cols: usize) -> Scalogram {
    let (h, w) = (s.height, s.width);
    let mut out = Scalogram::zeros(h, w);
    let map = |dst: usize, dst_n: usize, src_n: usize| -> (usize, usize, f64) {
        if src_n == 1 || dst_n == 1 {
            return (0, 0, 0.0);
        }
        let x = dst as f64 * (src_n - 1) as f64 / (dst_n - 1) as f64;
        let x0 = (x.floor() as usize).min(src_n - 1);
        let x1 = (x0 + 1).min(src_n - 1);
        (x0, x1, x - x0 as f64)
    };
    for y in 0..h {
        let (y0, y1, fy) = map(y, h, rows);
        for x in 0..w {
            let (x0, x1, fx) = map(x, w, cols);
            for c in 0..CHANNELS {
                let p = |yy: usize, xx: usize| s.pixels[s.idx(top + yy, left + xx, c)];
                let top_v = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot_v = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                let i = out.idx(y, x, c);
                out.pixels[i] = (top_v * (1.0 - fy) + bot_v * fy).clamp(0.0, 1.0);
            }
        }
    }
    out
}

pub fn flip_time(s: &Scalogram) -> Scalogram {
    let mut out = s.clone();
    for (dst, src) in out
        .pixels
        .chunks_exact_mut(s.width * CHANNELS)
        .zip(s.pixels.chunks_exact(s.width * CHANNELS))
    {
        for (d, sp) in dst.chunks_exact_mut(CHANNELS).zip(src.chunks_exact(CHANNELS).rev()) {
            d.copy_from_slice(sp);
        }
    }
    out
}

fn color_distort(
    s: &Scalogram,
    (brightness, contrast, saturation, hue, grayscale_prob): ((f64, f64), (f64, f64), (f64, f64), (f64, f64), f64),
    rng: &mut ChaCha8Rng,
) -> Scalogram {
    let b = uniform(rng, brightness);
    let c = uniform(rng, contrast);
    let sat = uniform(rng, saturation);
    let h = uniform(rng, hue);
    let gray = rng.random::<f64>() < grayscale_prob;

    let mut p = s.pixels.clone();
    p.iter_mut().for_each(|x| *x += b);
    clamp_all(&mut p);

    let n = (p.len() / CHANNELS) as f64;
    let mut means = [0.0; 3];
    for px in p.chunks_exact(CHANNELS) {
        for k in 0..3 {
            means[k] += px[k];
        }
    }
    means.iter_mut().for_each(|m| *m /= n);
    for px in p.chunks_exact_mut(CHANNELS) {
        for k in 0..3 {
            px[k] = (px[k] - means[k]) * c + means[k];
        }
    }
    clamp_all(&mut p);

    for px in p.chunks_exact_mut(CHANNELS) {
        let g = luma(px);
        px.iter_mut().for_each(|x| *x = g + sat * (*x - g));
    }
    clamp_all(&mut p);

    let r = hue_matrix(h);
    p = rotate_rows(&p, &r);
    clamp_all(&mut p);

    let out = Scalogram { pixels: p, ..s.clone() };
    if gray {
        grayscale(&out)
    } else {
        out
    }
}

pub fn apply_timefreq(s: &Scalogram, spec: &TimeFreqSpec, rng: &RngStream) -> Result<Scalogram> {
    s.check_shape(SCALOGRAM_SIZE, SCALOGRAM_SIZE)?;
    spec.validate()?;
    let mut rng = rng.rng();
    let out = match *spec {
        TimeFreqSpec::ColorDistort {
            brightness,
            contrast,
            saturation,
            hue,
            grayscale_prob,
        } => color_distort(s, (brightness, contrast, saturation, hue, grayscale_prob), &mut rng),
        TimeFreqSpec::CropResize { area, aspect } => {
            let (h, w) = (s.height, s.width);
            let total = (h * w) as f64;
            let log_aspect = (aspect.0.ln(), aspect.1.ln());
            let mut rect = (0, 0, h, w);
            for _ in 0..10 {
                let a = uniform(&mut rng, area) * total;
                let r = uniform(&mut rng, log_aspect).exp();
                let cw = (a * r).sqrt().round() as usize;
                let ch = (a / r).sqrt().round() as usize;
                if (1..=w).contains(&cw) && (1..=h).contains(&ch) {
                    let top = rng.random_range(0..=h - ch);
                    let left = rng.random_range(0..=w - cw);
                    rect = (top, left, ch, cw);
                    break;
                }
            }
            crop_resize(s, rect.0, rect.1, rect.2, rect.3)
        }
        TimeFreqSpec::Flip => flip_time(s),
    };
    Ok(out)
}

/// Something that a view pipeline can transform.
pub trait Augmentable: Clone {
    type Spec: Clone;
    fn augment(&self, spec: &Self::Spec, rng: &RngStream) -> Result<Self>;
}

impl Augmentable for SignalWindow {
    type Spec = TemporalSpec;
    fn augment(&self, spec: &TemporalSpec, rng: &RngStream) -> Result<Self> {
        apply_temporal(self, spec, rng)
    }
}

impl Augmentable for Scalogram {
    type Spec = TimeFreqSpec;
    fn augment(&self, spec: &TimeFreqSpec, rng: &RngStream) -> Result<Self> {
        apply_timefreq(self, spec, rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineMode {
    /// Every step applied independently with its own probability.
    #[default]
    Composed,
    /// Exactly one uniformly chosen step per view.
    OneOf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step<S> {
    pub transform: S,
    #[serde(default = "half")]
    pub p: f64,
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline<S> {
    pub steps: Vec<Step<S>>,
    pub mode: PipelineMode,
}

impl<S: Clone> Pipeline<S> {
    pub fn composed(steps: Vec<Step<S>>) -> Self {
        Self {
            steps,
            mode: PipelineMode::Composed,
        }
    }

    pub fn one_of(specs: Vec<S>) -> Self {
        Self {
            steps: specs.into_iter().map(|transform| Step { transform, p: 1.0 }).collect(),
            mode: PipelineMode::OneOf,
        }
    }

    pub fn single(spec: S, p: f64) -> Self {
        Self::composed(vec![Step { transform: spec, p }])
    }
}

fn run_pipeline<T: Augmentable>(sample: &T, pipeline: &Pipeline<T::Spec>, stream: &RngStream) -> Result<T> {
    let mut decide = stream.child(u64::MAX).rng();
    let mut out = sample.clone();
    match pipeline.mode {
        PipelineMode::Composed => {
            for (k, step) in pipeline.steps.iter().enumerate() {
                if decide.random::<f64>() < step.p {
                    out = out.augment(&step.transform, &stream.child(k as u64))?;
                }
            }
        }
        PipelineMode::OneOf => {
            let k = decide.random_range(0..pipeline.steps.len());
            out = out.augment(&pipeline.steps[k].transform, &stream.child(k as u64))?;
        }
    }
    Ok(out)
}

/// Two independent passes through the pipeline, drawn from the sub-streams
/// `rng.child(0)` and `rng.child(1)`.
pub fn make_views<T: Augmentable>(sample: &T, pipeline: &Pipeline<T::Spec>, rng: &RngStream) -> Result<(T, T)> {
    if pipeline.steps.is_empty() {
        return Err(Error::EmptyPipeline);
    }
    Ok((
        run_pipeline(sample, pipeline, &rng.child(0))?,
        run_pipeline(sample, pipeline, &rng.child(1))?,
    ))
}
