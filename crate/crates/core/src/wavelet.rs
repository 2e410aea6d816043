//! Continuous wavelet transform with the real Morlet wavelet
//! `ψ(t) = exp(-t²/2)·cos(5t)` and 3-channel scalogram rendering.
//!
//! Scales are expressed in seconds. A scale `a` responds most strongly to the
//! pseudo-frequency `(5 / 2π) / a` Hz.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{SignalWindow, CHANNELS, WINDOW_LEN};
use crate::error::{Error, Result};

/// Angular frequency of the Morlet carrier.
pub const MORLET_OMEGA: f64 = 5.0;
/// Wavelet support is truncated beyond this argument magnitude (|ψ| < 2e-8).
pub const MORLET_SUPPORT: f64 = 6.0;
/// Rows and columns of a standard scalogram.
pub const SCALOGRAM_SIZE: usize = 128;
/// Magic header of the binary scalogram export.
pub const SCALOGRAM_MAGIC: &[u8; 8] = b"TFSCA001";

#[inline]
pub fn morlet(t: f64) -> f64 {
    (-0.5 * t * t).exp() * (MORLET_OMEGA * t).cos()
}

/// Center frequency of the wavelet in cycles per unit argument.
pub fn center_frequency() -> f64 {
    MORLET_OMEGA / (2.0 * PI)
}

pub fn scale_to_frequency(scale: f64) -> f64 {
    center_frequency() / scale
}

pub fn frequency_to_scale(freq: f64) -> f64 {
    center_frequency() / freq
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleGrid {
    scales: Vec<f64>,
    dt: f64,
}

impl ScaleGrid {
    pub fn new(scales: Vec<f64>, dt: f64) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::InvalidRange("scale grid is empty".into()));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidRange(format!("dt must be positive, got {dt}")));
        }
        if scales.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::InvalidRange("scales must be positive".into()));
        }
        if scales.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::InvalidRange("scales must be strictly increasing".into()));
        }
        Ok(Self { scales, dt })
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    pub fn frequencies(&self) -> Vec<f64> {
        self.scales.iter().map(|&a| scale_to_frequency(a)).collect()
    }
}

/// Geometric scale grid whose pseudo-frequencies span `[f_min, f_max]`,
/// ascending in scale (descending in frequency).
pub fn scale_grid(n_scales: usize, f_min: f64, f_max: f64, dt: f64) -> Result<ScaleGrid> {
    if n_scales == 0 {
        return Err(Error::InvalidRange("n_scales must be at least 1".into()));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidRange(format!("dt must be positive, got {dt}")));
    }
    let nyquist = 0.5 / dt;
    if !(f_min > 0.0 && f_max < nyquist) {
        return Err(Error::InvalidRange(format!(
            "need 0 < f_min <= f_max < {nyquist} Hz, got [{f_min}, {f_max}]"
        )));
    }
    if n_scales == 1 {
        if f_min != f_max {
            return Err(Error::InvalidRange("a single scale needs f_min == f_max".into()));
        }
        return ScaleGrid::new(vec![frequency_to_scale(f_max)], dt);
    }
    if f_min >= f_max {
        return Err(Error::InvalidRange(format!(
            "f_min ({f_min}) must be below f_max ({f_max})"
        )));
    }
    let a_min = frequency_to_scale(f_max);
    let ratio = f_max / f_min;
    let last = (n_scales - 1) as f64;
    let scales = (0..n_scales)
        .map(|k| {
            if k == n_scales - 1 {
                frequency_to_scale(f_min)
            } else {
                a_min * ratio.powf(k as f64 / last)
            }
        })
        .collect();
    ScaleGrid::new(scales, dt)
}

pub const DEFAULT_F_MIN_HZ: f64 = 0.5;
pub const DEFAULT_F_MAX_HZ: f64 = 20.0;

/// The 128-scale grid over 0.5–20 Hz used for scalograms.
pub fn default_scale_grid(sample_rate_hz: f64) -> Result<ScaleGrid> {
    scale_grid(SCALOGRAM_SIZE, DEFAULT_F_MIN_HZ, DEFAULT_F_MAX_HZ, 1.0 / sample_rate_hz)
}

/// Wavelet coefficients, row-major `(n_scales, len)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub n_scales: usize,
    pub len: usize,
    pub data: Vec<f64>,
}

impl Coefficients {
    pub fn row(&self, s: usize) -> &[f64] {
        &self.data[s * self.len..(s + 1) * self.len]
    }
}

/// Precomputed, truncated wavelet kernels for a fixed grid and signal length.
#[derive(Debug, Clone)]
pub struct CwtPlan {
    grid: ScaleGrid,
    len: usize,
    /// Per scale: `dt/√a · ψ(d·dt/a)` for lags `d = 0..=half_width`.
    kernels: Vec<Vec<f64>>,
}

impl CwtPlan {
    pub fn new(grid: &ScaleGrid, len: usize) -> Result<Self> {
        if len < 2 {
            return Err(Error::EmptySignal);
        }
        let dt = grid.dt();
        let kernels = grid
            .scales()
            .iter()
            .map(|&a| {
                let norm = dt / a.sqrt();
                (0..len)
                    .map(|d| d as f64 * dt / a)
                    .take_while(|&arg| arg <= MORLET_SUPPORT)
                    .map(|arg| norm * morlet(arg))
                    .collect()
            })
            .collect();
        Ok(Self {
            grid: grid.clone(),
            len,
            kernels,
        })
    }

    pub fn grid(&self) -> &ScaleGrid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn transform(&self, channel: &[f64]) -> Result<Coefficients> {
        if channel.len() != self.len {
            return Err(Error::bad_shape(self.len, channel.len()));
        }
        let len = self.len;
        let mut data = vec![0.0; self.kernels.len() * len];
        for (row, kernel) in data.chunks_exact_mut(len).zip(&self.kernels) {
            let hw = kernel.len() - 1;
            for (b, out) in row.iter_mut().enumerate() {
                let lo = b.saturating_sub(hw);
                let hi = (b + hw).min(len - 1);
                *out = (lo..=hi).map(|n| channel[n] * kernel[n.abs_diff(b)]).sum();
            }
        }
        Ok(Coefficients {
            n_scales: self.kernels.len(),
            len,
            data,
        })
    }
}

/// Discretized transform `dt/√a · Σ_n x[n]·ψ((n−b)·dt/a)` for every grid scale
/// and translation `b`, truncated at the window edges.
pub fn cwt(channel: &[f64], grid: &ScaleGrid) -> Result<Coefficients> {
    CwtPlan::new(grid, channel.len())?.transform(channel)
}

/// Normalized magnitude image, row-major `(height, width, 3)`.
///
/// Row `r` holds grid scale `r`, so high frequencies sit at the top and low
/// frequencies at the bottom; columns are time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scalogram {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Scalogram {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width * CHANNELS],
        }
    }

    #[inline]
    pub fn idx(&self, row: usize, col: usize, c: usize) -> usize {
        (row * self.width + col) * CHANNELS + c
    }

    pub fn check_shape(&self, height: usize, width: usize) -> Result<()> {
        if self.height != height || self.width != width || self.pixels.len() != height * width * CHANNELS {
            return Err(Error::bad_shape(
                format!("{height}x{width}x{CHANNELS}"),
                format!("{}x{}x{} ({} values)", self.height, self.width, CHANNELS, self.pixels.len()),
            ));
        }
        Ok(())
    }
}

/// Turns windows into scalograms with a shared precomputed plan.
#[derive(Debug, Clone)]
pub struct ScalogramMaker {
    plan: CwtPlan,
}

impl ScalogramMaker {
    pub fn new(grid: &ScaleGrid) -> Result<Self> {
        if grid.len() != SCALOGRAM_SIZE {
            return Err(Error::bad_shape(
                format!("{SCALOGRAM_SIZE} scales"),
                format!("{} scales", grid.len()),
            ));
        }
        Ok(Self {
            plan: CwtPlan::new(grid, WINDOW_LEN)?,
        })
    }

    pub fn grid(&self) -> &ScaleGrid {
        self.plan.grid()
    }

    pub fn make(&self, w: &SignalWindow) -> Result<Scalogram> {
        w.check_shape(WINDOW_LEN)?;
        let (h, wd) = (SCALOGRAM_SIZE, WINDOW_LEN);
        let mut out = Scalogram::zeros(h, wd);
        for c in 0..CHANNELS {
            let coef = self.plan.transform(&w.channel(c))?;
            let (lo, hi) = coef
                .data
                .iter()
                .map(|v| v.abs())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            let range = hi - lo;
            if !(range > 0.0 && range.is_finite()) {
                continue;
            }
            for (i, v) in coef.data.iter().enumerate() {
                out.pixels[i * CHANNELS + c] = ((v.abs() - lo) / range).clamp(0.0, 1.0);
            }
        }
        Ok(out)
    }

    /// Order-stable batch conversion.
    pub fn make_batch<W: std::borrow::Borrow<SignalWindow> + Sync>(&self, windows: &[W]) -> Result<Vec<Scalogram>> {
        windows.par_iter().map(|w| self.make(w.borrow())).collect()
    }
}

/// Per-channel min–max normalized `|cwt|` image of one window.
pub fn scalogram(w: &SignalWindow, grid: &ScaleGrid) -> Result<Scalogram> {
    ScalogramMaker::new(grid)?.make(w)
}

/// Writes `TFSCA001` followed by every scalogram as little-endian f32,
/// row-major `(height, width, 3)`, back to back.
pub fn write_scalogram_binary(scalograms: &[Scalogram], path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + scalograms.iter().map(|s| s.pixels.len() * 4).sum::<usize>());
    bytes.extend_from_slice(SCALOGRAM_MAGIC);
    for s in scalograms {
        for &p in &s.pixels {
            bytes.extend_from_slice(&(p as f32).to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a standard-size (128×128×3) scalogram export.
pub fn read_scalogram_binary(path: &Path) -> Result<Vec<Scalogram>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 || &bytes[..8] != SCALOGRAM_MAGIC {
        return Err(Error::InvalidParams(format!("{} is not a scalogram export", path.display())));
    }
    let per = SCALOGRAM_SIZE * WINDOW_LEN * CHANNELS * 4;
    let body = &bytes[8..];
    if body.len() % per != 0 {
        return Err(Error::SizeMismatch {
            declared: per,
            found: body.len() % per,
        });
    }
    Ok(body
        .chunks_exact(per)
        .map(|chunk| Scalogram {
            height: SCALOGRAM_SIZE,
            width: WINDOW_LEN,
            pixels: chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect(),
        })
        .collect())
}

/// 8-bit RGB preview; the three accelerometer axes become R, G and B.
pub fn write_scalogram_png(s: &Scalogram, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), s.width as u32, s.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let data: Vec<u8> = s.pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(&data).map_err(to_io)?;
    writer.finish().map_err(to_io)?;
    Ok(())
}

/// Writes one channel of coefficients as CSV for inspection.
pub fn write_coefficients_csv(coef: &Coefficients, grid: &ScaleGrid, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut text = String::from("scale_s,frequency_hz");
    for b in 0..coef.len {
        text.push_str(&format!(",t{b}"));
    }
    text.push('\n');
    for (s, &a) in grid.scales().iter().enumerate() {
        text.push_str(&format!("{a},{}", scale_to_frequency(a)));
        for v in coef.row(s) {
            text.push_str(&format!(",{v}"));
        }
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window_from(f: impl Fn(usize, usize) -> f64) -> SignalWindow {
        SignalWindow {
            values: (0..WINDOW_LEN * 3).map(|i| f(i / 3, i % 3)).collect(),
            subject: "s".into(),
            label: None,
            recording: 0,
            source_offset: 0,
        }
    }

    #[test]
    fn morlet_values() {
        assert_eq!(morlet(0.0), 1.0);
        for t in [0.3, 1.7, 4.2] {
            assert_eq!(morlet(t), morlet(-t));
        }
        assert!(morlet(PI / 10.0).abs() < 1e-15);
        assert!(morlet(MORLET_SUPPORT).abs() < 2e-8);
    }

    #[test]
    fn grid_endpoints_and_ratio() {
        let g = scale_grid(128, 0.5, 20.0, 0.02).unwrap();
        let f = g.frequencies();
        assert!((f[0] - 20.0).abs() / 20.0 < 1e-9);
        assert!((f[127] - 0.5).abs() / 0.5 < 1e-9);
        let r0 = g.scales()[1] / g.scales()[0];
        for p in g.scales().windows(2) {
            assert!((p[1] / p[0] - r0).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_degenerate_rules() {
        let g = scale_grid(1, 5.0, 5.0, 0.02).unwrap();
        assert!((g.scales()[0] - center_frequency() / 5.0).abs() < 1e-15);
        assert!(matches!(scale_grid(4, 5.0, 5.0, 0.02), Err(Error::InvalidRange(_))));
        assert!(matches!(scale_grid(1, 4.0, 5.0, 0.02), Err(Error::InvalidRange(_))));
        assert!(matches!(scale_grid(8, 0.5, 30.0, 0.02), Err(Error::InvalidRange(_))));
        assert!(matches!(scale_grid(8, 0.0, 10.0, 0.02), Err(Error::InvalidRange(_))));
    }

    #[test]
    fn cwt_zero_and_short() {
        let g = scale_grid(16, 1.0, 10.0, 0.02).unwrap();
        let c = cwt(&[0.0; 64], &g).unwrap();
        assert!(c.data.iter().all(|&v| v == 0.0));
        assert!(matches!(cwt(&[1.0], &g), Err(Error::EmptySignal)));
        assert!(matches!(cwt(&[], &g), Err(Error::EmptySignal)));
    }

    #[test]
    fn scalogram_zero_and_identical_channels() {
        let g = scale_grid(128, 0.5, 20.0, 0.02).unwrap();
        let s = scalogram(&window_from(|_, _| 0.0), &g).unwrap();
        assert!(s.pixels.iter().all(|&p| p == 0.0));
        let s = scalogram(&window_from(|t, _| (t as f64 * 0.3).sin()), &g).unwrap();
        for px in s.pixels.chunks_exact(3) {
            assert_eq!(px[0], px[1]);
            assert_eq!(px[1], px[2]);
        }
        assert!(s.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn scalogram_rejects_wrong_grid() {
        let g = scale_grid(64, 0.5, 20.0, 0.02).unwrap();
        assert!(matches!(scalogram(&window_from(|_, _| 0.0), &g), Err(Error::BadShape { .. })));
    }

    #[test]
    fn binary_round_trip() {
        let g = scale_grid(128, 0.5, 20.0, 0.02).unwrap();
        let s = scalogram(&window_from(|t, c| ((t + c) as f64 * 0.2).cos()), &g).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.bin");
        write_scalogram_binary(&[s.clone(), s.clone()], &p).unwrap();
        let back = read_scalogram_binary(&p).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in back[1].pixels.iter().zip(&s.pixels) {
            assert_eq!(*a, *b as f32 as f64);
        }
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], b"TFSCA001");
        write_scalogram_png(&s, &dir.path().join("s.png")).unwrap();
    }
}
