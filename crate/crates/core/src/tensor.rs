//! Dense float64 tensors and the differentiable operations the network is
//! built from.
//!
//! Every forward operation here has an explicit backward counterpart that
//! maps an upstream gradient to gradients of the operation's inputs. The
//! model composes these by hand in reverse order; [`grad_check`] verifies
//! each backward pass against central finite differences.
//!
//! Layouts: images are `[N, H, W, C]` (channels last), convolution kernels
//! are `[kh, kw, C_in, C_out]`, latent codes are `[N, q]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("shape {shape:?} holds {expected} values but {actual} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: {dim} is {actual}, expected {expected}")]
    Dim {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: zero-sized extent in shape {shape:?}")]
    Empty { op: &'static str, shape: Vec<usize> },
}

/// Row-major n-dimensional array of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, ShapeError> {
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(ShapeError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, ShapeError> {
        let expected = shape.iter().product::<usize>();
        if expected != self.data.len() {
            return Err(ShapeError::DataLength {
                shape: shape.to_vec(),
                expected,
                actual: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Slice of the `i`-th entry along the leading axis.
    pub fn row(&self, i: usize) -> &[f64] {
        let stride = self.row_len();
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let stride = self.row_len();
        &mut self.data[i * stride..(i + 1) * stride]
    }

    fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Gathers entries along the leading axis.
    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        let stride = self.row_len();
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor { shape, data }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
                (lo.min(x), hi.max(x))
            })
    }

    fn expect_rank(&self, op: &'static str, rank: usize) -> Result<(), ShapeError> {
        if self.shape.len() != rank {
            return Err(ShapeError::Rank {
                op,
                expected: rank,
                shape: self.shape.clone(),
            });
        }
        Ok(())
    }
}

fn expect_dim(op: &'static str, dim: &'static str, expected: usize, actual: usize) -> Result<(), ShapeError> {
    if expected != actual {
        return Err(ShapeError::Dim {
            op,
            dim,
            expected,
            actual,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Same,
    Valid,
}

/// Geometry of a strided 2-D convolution, described from the encoder side:
/// `in_channels -> out_channels`. A decoder layer reuses the spec of the
/// encoder layer it mirrors and maps `out_channels -> in_channels`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: Padding,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub fn square(kernel: usize, stride: usize, padding: Padding, cin: usize, cout: usize) -> Self {
        Self {
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
            in_channels: cin,
            out_channels: cout,
        }
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.kernel_h, self.kernel_w, self.in_channels, self.out_channels]
    }

    /// Output extent along one axis. `None` when a valid convolution does
    /// not fit.
    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        if input == 0 {
            return None;
        }
        match self.padding {
            Padding::Same => Some(input.div_ceil(self.stride)),
            Padding::Valid => (input >= kernel).then(|| (input - kernel) / self.stride + 1),
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            self.output_extent(h, self.kernel_h)?,
            self.output_extent(w, self.kernel_w)?,
        ))
    }

    /// Zero rows/columns added before the first input element. With an odd
    /// padding total the extra one goes after (bottom/right).
    fn pad_before(&self, input: usize, output: usize, kernel: usize) -> usize {
        match self.padding {
            Padding::Valid => 0,
            Padding::Same => {
                let needed = (output - 1) * self.stride + kernel;
                needed.saturating_sub(input) / 2
            }
        }
    }
}

/// Gradients produced by a convolution backward pass.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Spatial bookkeeping shared by the convolution kernels: `wide` is the
/// encoder-side (conv input) image, `narrow` is the conv output.
#[derive(Clone, Copy)]
struct Geometry {
    n: usize,
    wide_h: usize,
    wide_w: usize,
    narrow_h: usize,
    narrow_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    c_wide: usize,
    c_narrow: usize,
}

impl Geometry {
    fn new(spec: &ConvSpec, n: usize, wide: (usize, usize), narrow: (usize, usize)) -> Self {
        Self {
            n,
            wide_h: wide.0,
            wide_w: wide.1,
            narrow_h: narrow.0,
            narrow_w: narrow.1,
            kh: spec.kernel_h,
            kw: spec.kernel_w,
            stride: spec.stride,
            pad_top: spec.pad_before(wide.0, narrow.0, spec.kernel_h),
            pad_left: spec.pad_before(wide.1, narrow.1, spec.kernel_w),
            c_wide: spec.in_channels,
            c_narrow: spec.out_channels,
        }
    }

    /// Wide-image coordinate hit by kernel tap `k` at narrow position `o`.
    #[inline]
    fn tap(&self, o: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k).checked_sub(pad)?;
        (pos < extent).then_some(pos)
    }

    /// Calls `f(wide_offset, narrow_offset, kernel_offset)` for every
    /// (output pixel, kernel tap) pair that lands inside the wide image.
    /// Offsets point at the channel-0 element of each pixel / tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for b in 0..self.n {
            for oy in 0..self.narrow_h {
                for ox in 0..self.narrow_w {
                    let narrow_off = ((b * self.narrow_h + oy) * self.narrow_w + ox) * self.c_narrow;
                    for ky in 0..self.kh {
                        let Some(iy) = self.tap(oy, ky, self.pad_top, self.wide_h) else {
                            continue;
                        };
                        for kx in 0..self.kw {
                            let Some(ix) = self.tap(ox, kx, self.pad_left, self.wide_w) else {
                                continue;
                            };
                            let wide_off = ((b * self.wide_h + iy) * self.wide_w + ix) * self.c_wide;
                            let k_off = (ky * self.kw + kx) * self.c_wide * self.c_narrow;
                            f(wide_off, narrow_off, k_off);
                        }
                    }
                }
            }
        }
    }
}

/// narrow[o] += Σ wide[c] · K[c, o]
fn correlate(g: &Geometry, wide: &[f64], kernel: &[f64], narrow: &mut [f64]) {
    let (cw, cn) = (g.c_wide, g.c_narrow);
    g.for_each_tap(|wo, no, ko| {
        let out = &mut narrow[no..no + cn];
        for c in 0..cw {
            let x = wide[wo + c];
            let krow = &kernel[ko + c * cn..ko + (c + 1) * cn];
            for (o, k) in out.iter_mut().zip(krow) {
                *o += x * k;
            }
        }
    });
}

/// wide[c] += Σ narrow[o] · K[c, o]  (adjoint of `correlate`)
fn correlate_transpose(g: &Geometry, narrow: &[f64], kernel: &[f64], wide: &mut [f64]) {
    let (cw, cn) = (g.c_wide, g.c_narrow);
    g.for_each_tap(|wo, no, ko| {
        let src = &narrow[no..no + cn];
        for c in 0..cw {
            let krow = &kernel[ko + c * cn..ko + (c + 1) * cn];
            let acc: f64 = src.iter().zip(krow).map(|(g, k)| g * k).sum();
            wide[wo + c] += acc;
        }
    });
}

/// dK[c, o] += Σ wide[c] · narrow[o]
fn kernel_outer(g: &Geometry, wide: &[f64], narrow: &[f64], dkernel: &mut [f64]) {
    let (cw, cn) = (g.c_wide, g.c_narrow);
    g.for_each_tap(|wo, no, ko| {
        let gout = &narrow[no..no + cn];
        for c in 0..cw {
            let x = wide[wo + c];
            let krow = &mut dkernel[ko + c * cn..ko + (c + 1) * cn];
            for (k, g) in krow.iter_mut().zip(gout) {
                *k += x * g;
            }
        }
    });
}

fn add_channel_bias(out: &mut [f64], bias: &[f64]) {
    for px in out.chunks_exact_mut(bias.len()) {
        for (o, b) in px.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn channel_sums(grad: &[f64], channels: usize) -> Tensor {
    let mut sums = vec![0.0; channels];
    for px in grad.chunks_exact(channels) {
        for (s, g) in sums.iter_mut().zip(px) {
            *s += g;
        }
    }
    Tensor {
        shape: vec![channels],
        data: sums,
    }
}

fn check_kernel(op: &'static str, kernel: &Tensor, spec: &ConvSpec) -> Result<(), ShapeError> {
    kernel.expect_rank(op, 4)?;
    let want = spec.kernel_shape();
    let names = [
        "kernel height",
        "kernel width",
        "kernel input channels",
        "kernel output channels",
    ];
    for (axis, name) in names.into_iter().enumerate() {
        expect_dim(op, name, want[axis], kernel.shape[axis])?;
    }
    Ok(())
}

fn conv_output_shape(op: &'static str, spec: &ConvSpec, h: usize, w: usize) -> Result<(usize, usize), ShapeError> {
    if spec.stride == 0 || spec.kernel_h == 0 || spec.kernel_w == 0 {
        return Err(ShapeError::Empty {
            op,
            shape: spec.kernel_shape().to_vec(),
        });
    }
    spec.output_hw(h, w).ok_or(ShapeError::Dim {
        op,
        dim: "input extent (smaller than kernel)",
        expected: spec.kernel_h.max(spec.kernel_w),
        actual: h.min(w),
    })
}

/// Strided cross-correlation plus per-channel bias.
///
/// `input` is `[N, H, W, C_in]`, `kernel` is `[kh, kw, C_in, C_out]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Result<Tensor, ShapeError> {
    const OP: &str = "conv2d";
    input.expect_rank(OP, 4)?;
    check_kernel(OP, kernel, spec)?;
    expect_dim(OP, "input channels", spec.in_channels, input.shape[3])?;
    expect_dim(OP, "bias length", spec.out_channels, bias.len())?;
    let (n, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (oh, ow) = conv_output_shape(OP, spec, h, w)?;
    let g = Geometry::new(spec, n, (h, w), (oh, ow));
    let mut out = vec![0.0; n * oh * ow * spec.out_channels];
    correlate(&g, &input.data, &kernel.data, &mut out);
    add_channel_bias(&mut out, &bias.data);
    Ok(Tensor {
        shape: vec![n, oh, ow, spec.out_channels],
        data: out,
    })
}

pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
) -> Result<ConvGrads, ShapeError> {
    const OP: &str = "conv2d_backward";
    input.expect_rank(OP, 4)?;
    grad_out.expect_rank(OP, 4)?;
    check_kernel(OP, kernel, spec)?;
    let (n, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (oh, ow) = conv_output_shape(OP, spec, h, w)?;
    expect_dim(OP, "gradient batch", n, grad_out.shape[0])?;
    expect_dim(OP, "gradient height", oh, grad_out.shape[1])?;
    expect_dim(OP, "gradient width", ow, grad_out.shape[2])?;
    expect_dim(OP, "gradient channels", spec.out_channels, grad_out.shape[3])?;
    let g = Geometry::new(spec, n, (h, w), (oh, ow));
    let mut dinput = Tensor::zeros(input.shape());
    correlate_transpose(&g, &grad_out.data, &kernel.data, &mut dinput.data);
    let mut dkernel = Tensor::zeros(kernel.shape());
    kernel_outer(&g, &input.data, &grad_out.data, &mut dkernel.data);
    Ok(ConvGrads {
        input: dinput,
        kernel: dkernel,
        bias: channel_sums(&grad_out.data, spec.out_channels),
    })
}

/// Transposed (strided) convolution: the adjoint of [`conv2d`] with the
/// same `spec`, plus a bias on the `spec.in_channels` output channels.
///
/// `input` is `[N, H, W, spec.out_channels]`, `kernel` uses the encoder
/// layout `[kh, kw, spec.in_channels, spec.out_channels]`, and
/// `target_hw` is the spatial extent of the image the mirrored encoder
/// layer consumed. `conv2d` must map `target_hw` to the input's extent.
pub fn deconv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    spec: &ConvSpec,
    target_hw: (usize, usize),
) -> Result<Tensor, ShapeError> {
    const OP: &str = "deconv2d";
    input.expect_rank(OP, 4)?;
    check_kernel(OP, kernel, spec)?;
    expect_dim(OP, "input channels", spec.out_channels, input.shape[3])?;
    expect_dim(OP, "bias length", spec.in_channels, bias.len())?;
    let g = deconv_geometry(OP, spec, input, target_hw)?;
    let mut out = vec![0.0; g.n * target_hw.0 * target_hw.1 * spec.in_channels];
    correlate_transpose(&g, &input.data, &kernel.data, &mut out);
    add_channel_bias(&mut out, &bias.data);
    Ok(Tensor {
        shape: vec![g.n, target_hw.0, target_hw.1, spec.in_channels],
        data: out,
    })
}

pub fn deconv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
) -> Result<ConvGrads, ShapeError> {
    const OP: &str = "deconv2d_backward";
    input.expect_rank(OP, 4)?;
    grad_out.expect_rank(OP, 4)?;
    check_kernel(OP, kernel, spec)?;
    let target_hw = (grad_out.shape[1], grad_out.shape[2]);
    let g = deconv_geometry(OP, spec, input, target_hw)?;
    expect_dim(OP, "gradient batch", g.n, grad_out.shape[0])?;
    expect_dim(OP, "gradient channels", spec.in_channels, grad_out.shape[3])?;
    let mut dinput = Tensor::zeros(input.shape());
    correlate(&g, &grad_out.data, &kernel.data, &mut dinput.data);
    let mut dkernel = Tensor::zeros(kernel.shape());
    kernel_outer(&g, &grad_out.data, &input.data, &mut dkernel.data);
    Ok(ConvGrads {
        input: dinput,
        kernel: dkernel,
        bias: channel_sums(&grad_out.data, spec.in_channels),
    })
}

fn deconv_geometry(
    op: &'static str,
    spec: &ConvSpec,
    input: &Tensor,
    target_hw: (usize, usize),
) -> Result<Geometry, ShapeError> {
    let (th, tw) = target_hw;
    let (eh, ew) = conv_output_shape(op, spec, th, tw)?;
    expect_dim(op, "input height (from target shape)", eh, input.shape[1])?;
    expect_dim(op, "input width (from target shape)", ew, input.shape[2])?;
    Ok(Geometry::new(spec, input.shape[0], (th, tw), (eh, ew)))
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities
// ---------------------------------------------------------------------------

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Gradient through a sigmoid, given the forward output `y`.
pub fn sigmoid_backward(y: &Tensor, grad: &Tensor) -> Tensor {
    zip_map(y, grad, |y, g| g * y * (1.0 - y))
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { slope * v })
}

pub fn leaky_relu_backward(x: &Tensor, slope: f64, grad: &Tensor) -> Tensor {
    zip_map(x, grad, |x, g| if x > 0.0 { g } else { slope * g })
}

pub fn relu(x: &Tensor) -> Tensor {
    leaky_relu(x, 0.0)
}

pub fn relu_backward(x: &Tensor, grad: &Tensor) -> Tensor {
    leaky_relu_backward(x, 0.0, grad)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape, b.shape);
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

fn softmax_into(v: &[f64], out: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(v) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Softmax over a single vector (any shape; treated as flat).
pub fn softmax(v: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(v.shape());
    softmax_into(&v.data, &mut out.data);
    out
}

/// Softmax applied to each row of a `[N, K]` tensor.
pub fn softmax_rows(v: &Tensor) -> Result<Tensor, ShapeError> {
    v.expect_rank("softmax_rows", 2)?;
    let k = v.shape[1];
    let mut out = Tensor::zeros(v.shape());
    for (src, dst) in v.data.chunks_exact(k).zip(out.data.chunks_exact_mut(k)) {
        softmax_into(src, dst);
    }
    Ok(out)
}

/// Vector-Jacobian product of row-wise softmax, given its output.
pub fn softmax_rows_backward(probs: &Tensor, grad: &Tensor) -> Tensor {
    let k = probs.shape[probs.rank() - 1];
    let mut out = Tensor::zeros(probs.shape());
    for ((p, g), o) in probs
        .data
        .chunks_exact(k)
        .zip(grad.data.chunks_exact(k))
        .zip(out.data.chunks_exact_mut(k))
    {
        let inner: f64 = p.iter().zip(g).map(|(p, g)| p * g).sum();
        for ((o, p), g) in o.iter_mut().zip(p).zip(g) {
            *o = p * (g - inner);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Distances and dense products
// ---------------------------------------------------------------------------

/// `D[i, j] = ||z_i - p_j||²` for `Z: [N, q]`, `P: [m, q]`.
pub fn pairwise_sq_dist(z: &Tensor, p: &Tensor) -> Result<Tensor, ShapeError> {
    const OP: &str = "pairwise_sq_dist";
    z.expect_rank(OP, 2)?;
    p.expect_rank(OP, 2)?;
    expect_dim(OP, "prototype dimension", z.shape[1], p.shape[1])?;
    let (n, m) = (z.shape[0], p.shape[0]);
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let zi = z.row(i);
        for j in 0..m {
            out.push(sq_dist(zi, p.row(j)));
        }
    }
    Ok(Tensor {
        shape: vec![n, m],
        data: out,
    })
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Returns `(dZ, dP)` for upstream gradient `grad: [N, m]`.
pub fn pairwise_sq_dist_backward(z: &Tensor, p: &Tensor, grad: &Tensor) -> (Tensor, Tensor) {
    let (n, m, q) = (z.shape[0], p.shape[0], z.shape[1]);
    let mut dz = Tensor::zeros(z.shape());
    let mut dp = Tensor::zeros(p.shape());
    for i in 0..n {
        for j in 0..m {
            let g = grad.data[i * m + j];
            if g == 0.0 {
                continue;
            }
            for c in 0..q {
                let diff = 2.0 * g * (z.data[i * q + c] - p.data[j * q + c]);
                dz.data[i * q + c] += diff;
                dp.data[j * q + c] -= diff;
            }
        }
    }
    (dz, dp)
}

/// `Y = X · Wᵀ` for `X: [N, m]`, `W: [K, m]`, giving `[N, K]`.
pub fn matmul_transposed(x: &Tensor, w: &Tensor) -> Result<Tensor, ShapeError> {
    const OP: &str = "matmul_transposed";
    x.expect_rank(OP, 2)?;
    w.expect_rank(OP, 2)?;
    expect_dim(OP, "inner dimension", w.shape[1], x.shape[1])?;
    let (n, k) = (x.shape[0], w.shape[0]);
    let mut out = Vec::with_capacity(n * k);
    for i in 0..n {
        let xi = x.row(i);
        for r in 0..k {
            out.push(xi.iter().zip(w.row(r)).map(|(a, b)| a * b).sum());
        }
    }
    Ok(Tensor {
        shape: vec![n, k],
        data: out,
    })
}

/// Returns `(dX, dW)` for `Y = X · Wᵀ`.
pub fn matmul_transposed_backward(x: &Tensor, w: &Tensor, grad: &Tensor) -> (Tensor, Tensor) {
    let (n, m, k) = (x.shape[0], x.shape[1], w.shape[0]);
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    for i in 0..n {
        for r in 0..k {
            let g = grad.data[i * k + r];
            for c in 0..m {
                dx.data[i * m + c] += g * w.data[r * m + c];
                dw.data[r * m + c] += g * x.data[i * m + c];
            }
        }
    }
    (dx, dw)
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradCheckError {
    #[error("function value is not finite when coordinate {index} is perturbed")]
    NonFinite { index: usize },
    #[error("analytic gradient has shape {analytic:?}, point has shape {point:?}")]
    Shape { analytic: Vec<usize>, point: Vec<usize> },
}

/// Compares `analytic` against the central-difference gradient of `f` at
/// `x`, returning the largest per-coordinate relative error
/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(mut f: F, x: &Tensor, analytic: &Tensor, eps: f64) -> Result<f64, GradCheckError>
where
    F: FnMut(&Tensor) -> f64,
{
    if analytic.shape != x.shape {
        return Err(GradCheckError::Shape {
            analytic: analytic.shape.clone(),
            point: x.shape.clone(),
        });
    }
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let plus = f(&probe);
        probe.data[i] = orig - eps;
        let minus = f(&probe);
        probe.data[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(GradCheckError::NonFinite { index: i });
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data[i];
        if !a.is_finite() {
            return Err(GradCheckError::NonFinite { index: i });
        }
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
