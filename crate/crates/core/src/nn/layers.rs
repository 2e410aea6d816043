//! Dense and valid (unpadded, stride 1) convolution layers.
//!
//! Activations are channel-last: a 1-D map of length `T` with `C` channels is
//! `(T, C)` row-major, a 2-D map is `(H, W, C)` row-major. Convolution weights
//! are `[out, k, in]` (1-D) and `[out, k, k, in]` (2-D), so one kernel row
//! matches a contiguous slice of the input.

use super::{join, Module, ParamKind, Precision, Tensor};

trait GemmScalar: Copy + Default {
    /// `C = alpha·A·B + beta·C` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
    fn zero() -> Self;
    fn one() -> Self;
}

impl GemmScalar for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
}

impl GemmScalar for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
}

/// Valid 2-D correlation as a sum of `k` strided GEMMs per output row.
///
/// For kernel row `ky`, output row `y` reads input row `y + ky` as an
/// overlapping `(wo, k·c)` matrix with row stride `c`; no im2col buffer.
#[allow(clippy::too_many_arguments)]
fn conv2d_rows<T: GemmScalar>(
    input: &[T],
    w_in: usize,
    c_in: usize,
    weight: &[T],
    k: usize,
    c_out: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let mut out = vec![T::default(); ho * wo * c_out];
    let kc = k * c_in;
    for y in 0..ho {
        for ky in 0..k {
            let a_off = (y + ky) * w_in * c_in;
            debug_assert!(a_off + (wo - 1) * c_in + kc <= input.len());
            let beta = if ky == 0 { T::zero() } else { T::one() };
            // SAFETY: A spans rows x in 0..wo with stride c_in and kc columns,
            // all inside input row (y + ky) and the next k-1 pixels, which the
            // assertion above bounds; B covers weight[o][ky][..] for o < c_out;
            // C is exactly output row y.
            unsafe {
                T::gemm(
                    wo,
                    kc,
                    c_out,
                    input.as_ptr().add(a_off),
                    c_in as isize,
                    1,
                    weight.as_ptr().add(ky * kc),
                    1,
                    (k * kc) as isize,
                    beta,
                    out.as_mut_ptr().add(y * wo * c_out),
                    c_out as isize,
                    1,
                );
            }
        }
    }
    out
}

fn run_precision<F32, F64>(precision: Precision, f64_path: F64, f32_path: F32) -> Vec<f64>
where
    F64: FnOnce() -> Vec<f64>,
    F32: FnOnce() -> Vec<f32>,
{
    match precision {
        Precision::Double => f64_path(),
        Precision::Single => f32_path().into_iter().map(f64::from).collect(),
    }
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Convolution operations shared by both encoders.
pub trait ConvLayer: Module + Clone + Send + Sync {
    fn in_channels(&self) -> usize;
    fn out_channels(&self) -> usize;
    /// Spatial dims of the output for input dims, or `None` if too small.
    fn output_dims(&self, dims: &[usize]) -> Option<Vec<usize>>;
    /// Pre-activation output.
    fn forward(&self, input: &[f64], dims: &[usize], precision: Precision) -> Vec<f64>;
    /// Accumulates parameter gradients into `grad` and, if requested, the
    /// input gradient into `d_input`. Output positions whose gradient row is
    /// all zero are skipped, which makes the pass after a global max-pool
    /// sparse.
    fn backward(&self, input: &[f64], dims: &[usize], d_out: &[f64], grad: &mut Self, d_input: Option<&mut [f64]>);
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn new(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out_dim, in_dim]),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let n = self.in_dim();
        self.weight
            .data
            .chunks_exact(n)
            .zip(&self.bias.data)
            .map(|(row, b)| b + dot(row, x))
            .collect()
    }

    pub fn backward(&self, x: &[f64], d_out: &[f64], grad: &mut Dense, d_input: Option<&mut [f64]>) {
        let n = self.in_dim();
        for (o, &g) in d_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias.data[o] += g;
            axpy(g, x, &mut grad.weight.data[o * n..(o + 1) * n]);
        }
        if let Some(dx) = d_input {
            for (row, &g) in self.weight.data.chunks_exact(n).zip(d_out) {
                if g != 0.0 {
                    axpy(g, row, dx);
                }
            }
        }
    }
}

impl Module for Dense {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        f(&join(prefix, "weight"), ParamKind::Weight, &self.weight);
        f(&join(prefix, "bias"), ParamKind::Bias, &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        f(&join(prefix, "weight"), ParamKind::Weight, &mut self.weight);
        f(&join(prefix, "bias"), ParamKind::Bias, &mut self.bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv1d {
    pub fn new(kernel: usize, in_ch: usize, out_ch: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out_ch, kernel, in_ch]),
            bias: Tensor::zeros(&[out_ch]),
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape[1]
    }
}

impl Module for Conv1d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        f(&join(prefix, "weight"), ParamKind::ConvWeight, &self.weight);
        f(&join(prefix, "bias"), ParamKind::Bias, &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        f(&join(prefix, "weight"), ParamKind::ConvWeight, &mut self.weight);
        f(&join(prefix, "bias"), ParamKind::Bias, &mut self.bias);
    }
}

impl ConvLayer for Conv1d {
    fn in_channels(&self) -> usize {
        self.weight.shape[2]
    }

    fn out_channels(&self) -> usize {
        self.weight.shape[0]
    }

    fn output_dims(&self, dims: &[usize]) -> Option<Vec<usize>> {
        match dims {
            [t] if *t >= self.kernel() => Some(vec![t - self.kernel() + 1]),
            _ => None,
        }
    }

    fn forward(&self, input: &[f64], dims: &[usize], precision: Precision) -> Vec<f64> {
        let (c_in, c_out, k) = (self.in_channels(), self.out_channels(), self.kernel());
        let to = self.output_dims(dims).expect("input shorter than kernel");
        let mut out = run_precision(
            precision,
            || conv1d_gemm(input, &self.weight.data, k, c_in, c_out, to[0]),
            || conv1d_gemm(&to_f32(input), &to_f32(&self.weight.data), k, c_in, c_out, to[0]),
        );
        for row in out.chunks_exact_mut(c_out) {
            for (v, b) in row.iter_mut().zip(&self.bias.data) {
                *v += b;
            }
        }
        out
    }

    fn backward(&self, input: &[f64], dims: &[usize], d_out: &[f64], grad: &mut Self, mut d_input: Option<&mut [f64]>) {
        let (c_in, c_out, k) = (self.in_channels(), self.out_channels(), self.kernel());
        let to = self.output_dims(dims).expect("input shorter than kernel")[0];
        let kc = k * c_in;
        for t in 0..to {
            let g_row = &d_out[t * c_out..(t + 1) * c_out];
            if g_row.iter().all(|&g| g == 0.0) {
                continue;
            }
            let patch = &input[t * c_in..t * c_in + kc];
            for (o, &g) in g_row.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                grad.bias.data[o] += g;
                axpy(g, patch, &mut grad.weight.data[o * kc..(o + 1) * kc]);
                if let Some(dx) = d_input.as_deref_mut() {
                    axpy(g, &self.weight.data[o * kc..(o + 1) * kc], &mut dx[t * c_in..t * c_in + kc]);
                }
            }
        }
    }
}

fn conv1d_gemm<T: GemmScalar>(input: &[T], weight: &[T], k: usize, c_in: usize, c_out: usize, to: usize) -> Vec<T> {
    let mut out = vec![T::default(); to * c_out];
    let kc = k * c_in;
    debug_assert!((to - 1) * c_in + kc <= input.len());
    // SAFETY: rows t < to read input[t*c_in .. t*c_in + kc], bounded by the
    // assertion; B reads weight[o*kc + i] for o < c_out, i < kc.
    unsafe {
        T::gemm(
            to,
            kc,
            c_out,
            input.as_ptr(),
            c_in as isize,
            1,
            weight.as_ptr(),
            1,
            kc as isize,
            T::zero(),
            out.as_mut_ptr(),
            c_out as isize,
            1,
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv2d {
    pub fn new(kernel: usize, in_ch: usize, out_ch: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out_ch, kernel, kernel, in_ch]),
            bias: Tensor::zeros(&[out_ch]),
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape[1]
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        f(&join(prefix, "weight"), ParamKind::ConvWeight, &self.weight);
        f(&join(prefix, "bias"), ParamKind::Bias, &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        f(&join(prefix, "weight"), ParamKind::ConvWeight, &mut self.weight);
        f(&join(prefix, "bias"), ParamKind::Bias, &mut self.bias);
    }
}

impl ConvLayer for Conv2d {
    fn in_channels(&self) -> usize {
        self.weight.shape[3]
    }

    fn out_channels(&self) -> usize {
        self.weight.shape[0]
    }

    fn output_dims(&self, dims: &[usize]) -> Option<Vec<usize>> {
        let k = self.kernel();
        match dims {
            [h, w] if *h >= k && *w >= k => Some(vec![h - k + 1, w - k + 1]),
            _ => None,
        }
    }

    fn forward(&self, input: &[f64], dims: &[usize], precision: Precision) -> Vec<f64> {
        let (c_in, c_out, k) = (self.in_channels(), self.out_channels(), self.kernel());
        let od = self.output_dims(dims).expect("input smaller than kernel");
        let (ho, wo) = (od[0], od[1]);
        let mut out = run_precision(
            precision,
            || conv2d_rows(input, dims[1], c_in, &self.weight.data, k, c_out, ho, wo),
            || conv2d_rows(&to_f32(input), dims[1], c_in, &to_f32(&self.weight.data), k, c_out, ho, wo),
        );
        for row in out.chunks_exact_mut(c_out) {
            for (v, b) in row.iter_mut().zip(&self.bias.data) {
                *v += b;
            }
        }
        out
    }

    fn backward(&self, input: &[f64], dims: &[usize], d_out: &[f64], grad: &mut Self, mut d_input: Option<&mut [f64]>) {
        let (c_in, c_out, k) = (self.in_channels(), self.out_channels(), self.kernel());
        let od = self.output_dims(dims).expect("input smaller than kernel");
        let (ho, wo, w_in) = (od[0], od[1], dims[1]);
        let kc = k * c_in;
        for y in 0..ho {
            for x in 0..wo {
                let p = y * wo + x;
                let g_row = &d_out[p * c_out..(p + 1) * c_out];
                if g_row.iter().all(|&g| g == 0.0) {
                    continue;
                }
                for (o, &g) in g_row.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    grad.bias.data[o] += g;
                    for ky in 0..k {
                        let src = ((y + ky) * w_in + x) * c_in;
                        let wk = (o * k + ky) * kc;
                        axpy(g, &input[src..src + kc], &mut grad.weight.data[wk..wk + kc]);
                        if let Some(dx) = d_input.as_deref_mut() {
                            axpy(g, &self.weight.data[wk..wk + kc], &mut dx[src..src + kc]);
                        }
                    }
                }
            }
        }
    }
}
