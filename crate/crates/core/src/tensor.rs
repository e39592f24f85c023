//! Dense channel-major tensors and the forward/backward compute kernels.
//!
//! Convolution lowers each input window into a column matrix and multiplies
//! it against the filter bank. The numeric result is the plain sliding-window
//! sum with zero padding outside the input; only the evaluation order differs.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::Serialize;
use thiserror::Error;

use crate::model::{conv_output_side, pool_output_side, ActivationKind, Shape, LEAKY_SLOPE};

/// Variance epsilon used by batch normalization.
pub const BN_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    Double,
}

/// Floating-point element type a network can be compiled for.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const PRECISION: Precision;

    /// `c = alpha * a * b + beta * c` over strided row/column layouts.
    ///
    /// # Safety
    /// Every index reachable through the given strides must lie inside the
    /// respective buffer.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
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

    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 converts")
    }

    fn of_f32(v: f32) -> Self {
        <Self as FromPrimitive>::from_f32(v).expect("f32 converts")
    }

    fn as_f32(self) -> f32 {
        ToPrimitive::to_f32(&self).expect("float converts")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("float converts")
    }
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::Single;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::Double;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major operand: `rows × cols`, optionally read transposed.
#[derive(Clone, Copy)]
struct MatRef<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    transposed: bool,
}

impl<T> MatRef<'_, T> {
    fn dims(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c (m×n) = op(a) · op(b) + beta · c`, all buffers row-major.
fn gemm<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T]) {
    let (m, k) = a.dims();
    let (kb, n) = b.dims();
    assert_eq!(k, kb, "inner dimensions differ");
    assert!(a.data.len() >= a.rows * a.cols && b.data.len() >= b.rows * b.cols);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: lengths were checked against the dimensions the strides walk.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KernelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

fn mismatch(msg: impl Into<String>) -> KernelError {
    KernelError::ShapeMismatch(msg.into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![T::zero(); shape.len()] }
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        Tensor { shape, data: vec![value; shape.len()] }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self, KernelError> {
        if data.len() != shape.len() {
            return Err(mismatch(format!(
                "{} values for shape {shape} ({} expected)",
                data.len(),
                shape.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.c {
            for y in 0..shape.h {
                for x in 0..shape.w {
                    data.push(f(c, y, x));
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape.h + y) * self.shape.w + x
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(c, y, x)]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.shape.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }

    /// Reshape in place, reusing the existing allocation when it is large enough.
    pub(crate) fn reshape_for(&mut self, shape: Shape) {
        self.shape = shape;
        self.data.resize(shape.len(), T::zero());
    }
}

/// Square window parameters shared by convolution and pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub size: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn new(size: usize, stride: usize, pad: usize) -> Self {
        Window { size, stride, pad }
    }
}

pub fn conv_output_shape(input: Shape, filters: usize, w: Window) -> Result<Shape, KernelError> {
    let side = |x| {
        conv_output_side(x, w.size, w.stride, w.pad)
            .ok_or_else(|| mismatch(format!("conv window {w:?} does not fit input {input}")))
    };
    Ok(Shape::new(filters, side(input.h)?, side(input.w)?))
}

pub fn pool_output_shape(input: Shape, w: Window) -> Result<Shape, KernelError> {
    if w.pad >= w.size {
        return Err(mismatch(format!("pool pad {} must be below size {}", w.pad, w.size)));
    }
    let side = |x| {
        pool_output_side(x, w.size, w.stride, w.pad)
            .ok_or_else(|| mismatch(format!("pool window {w:?} does not fit input {input}")))
    };
    Ok(Shape::new(input.c, side(input.h)?, side(input.w)?))
}

/// Number of scalars in the column matrix for one convolution.
pub fn im2col_len(input: Shape, out: Shape, w: Window) -> usize {
    input.c * w.size * w.size * out.plane()
}

fn is_pointwise(w: Window) -> bool {
    w.size == 1 && w.stride == 1 && w.pad == 0
}

/// Column matrix with rows `(c, kh, kw)` and columns `(oy, ox)`.
fn im2col<T: Scalar>(input: &Tensor<T>, out: Shape, w: Window, cols: &mut Vec<T>) {
    let s = input.shape;
    let plane = out.plane();
    cols.clear();
    cols.resize(im2col_len(s, out, w), T::zero());
    let src = input.as_slice();
    for c in 0..s.c {
        let chan = &src[c * s.plane()..(c + 1) * s.plane()];
        for kh in 0..w.size {
            for kw in 0..w.size {
                let row = (c * w.size + kh) * w.size + kw;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..out.h {
                    let iy = (oy * w.stride + kh) as isize - w.pad as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let in_row = &chan[iy as usize * s.w..(iy as usize + 1) * s.w];
                    let out_row = &mut dst[oy * out.w..(oy + 1) * out.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * w.stride + kw) as isize - w.pad as isize;
                        if ix >= 0 && (ix as usize) < s.w {
                            *o = in_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add of a column matrix back onto an input-shaped gradient.
fn col2im<T: Scalar>(cols: &[T], input: Shape, out: Shape, w: Window, dst: &mut Tensor<T>) {
    let plane = out.plane();
    let data = dst.as_mut_slice();
    for c in 0..input.c {
        for kh in 0..w.size {
            for kw in 0..w.size {
                let row = (c * w.size + kh) * w.size + kw;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..out.h {
                    let iy = (oy * w.stride + kh) as isize - w.pad as isize;
                    if iy < 0 || iy >= input.h as isize {
                        continue;
                    }
                    let base = (c * input.h + iy as usize) * input.w;
                    for ox in 0..out.w {
                        let ix = (ox * w.stride + kw) as isize - w.pad as isize;
                        if ix >= 0 && (ix as usize) < input.w {
                            data[base + ix as usize] = data[base + ix as usize] + src[oy * out.w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_kernel<T>(input: Shape, kernel: &[T], filters: usize, w: Window) -> Result<(), KernelError> {
    let expected = filters * input.c * w.size * w.size;
    if filters == 0 || kernel.len() != expected {
        return Err(mismatch(format!(
            "kernel has {} weights, {filters}×{}×{}×{} = {expected} expected for input {input}",
            kernel.len(),
            input.c,
            w.size,
            w.size
        )));
    }
    Ok(())
}

/// Convolution into a caller-owned output, using `scratch` for the column matrix.
pub fn conv2d_into<T: Scalar>(
    input: &Tensor<T>,
    kernel: &[T],
    bias: Option<&[T]>,
    filters: usize,
    w: Window,
    out: &mut Tensor<T>,
    scratch: &mut Vec<T>,
) -> Result<(), KernelError> {
    check_kernel(input.shape, kernel, filters, w)?;
    let oshape = conv_output_shape(input.shape, filters, w)?;
    if let Some(b) = bias {
        if b.len() != filters {
            return Err(mismatch(format!("{} biases for {filters} filters", b.len())));
        }
    }
    out.reshape_for(oshape);
    let ckk = input.shape.c * w.size * w.size;
    let plane = oshape.plane();
    let cols: &[T] = if is_pointwise(w) {
        input.as_slice()
    } else {
        im2col(input, oshape, w, scratch);
        scratch
    };
    gemm(
        MatRef { data: kernel, rows: filters, cols: ckk, transposed: false },
        MatRef { data: cols, rows: ckk, cols: plane, transposed: false },
        T::zero(),
        out.as_mut_slice(),
    );
    // a separate pass is cheaper than accumulating onto a prefilled output
    if let Some(b) = bias {
        for (chunk, &bf) in out.as_mut_slice().chunks_exact_mut(plane).zip(b) {
            chunk.iter_mut().for_each(|v| *v = *v + bf);
        }
    }
    Ok(())
}

/// `out[f][y][x] = bias[f] + Σ w[f][c][kh][kw] · in[c][y·s+kh−p][x·s+kw−p]`, zero outside the input.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &[T],
    bias: Option<&[T]>,
    filters: usize,
    w: Window,
) -> Result<Tensor<T>, KernelError> {
    let mut out = Tensor::zeros(Shape::new(0, 0, 0));
    let mut scratch = Vec::new();
    conv2d_into(input, kernel, bias, filters, w, &mut out, &mut scratch)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    upstream: &Tensor<T>,
    input: &Tensor<T>,
    kernel: &[T],
    filters: usize,
    w: Window,
) -> Result<ConvGrads<T>, KernelError> {
    check_kernel(input.shape, kernel, filters, w)?;
    let oshape = conv_output_shape(input.shape, filters, w)?;
    if upstream.shape != oshape {
        return Err(mismatch(format!("upstream {} vs forward output {oshape}", upstream.shape)));
    }
    let ckk = input.shape.c * w.size * w.size;
    let plane = oshape.plane();
    let mut scratch = Vec::new();
    let pointwise = is_pointwise(w);
    let cols: &[T] = if pointwise {
        input.as_slice()
    } else {
        im2col(input, oshape, w, &mut scratch);
        &scratch
    };
    let dout = upstream.as_slice();

    let mut dkernel = vec![T::zero(); filters * ckk];
    gemm(
        MatRef { data: dout, rows: filters, cols: plane, transposed: false },
        MatRef { data: cols, rows: ckk, cols: plane, transposed: true },
        T::zero(),
        &mut dkernel,
    );
    let dbias = dout.chunks_exact(plane).map(|ch| ch.iter().copied().sum()).collect();

    let mut dcols = vec![T::zero(); ckk * plane];
    gemm(
        MatRef { data: kernel, rows: filters, cols: ckk, transposed: true },
        MatRef { data: dout, rows: filters, cols: plane, transposed: false },
        T::zero(),
        &mut dcols,
    );
    let dinput = if pointwise {
        Tensor::from_vec(input.shape, dcols)?
    } else {
        let mut d = Tensor::zeros(input.shape);
        col2im(&dcols, input.shape, oshape, w, &mut d);
        d
    };
    Ok(ConvGrads { input: dinput, kernel: dkernel, bias: dbias })
}

/// Max-pooling into a caller-owned output; `argmax` receives flat input indices.
///
/// Padding is appended on the bottom/right edge and never wins the max. Ties
/// resolve to the smallest flat index.
pub fn maxpool2d_into<T: Scalar>(
    input: &Tensor<T>,
    w: Window,
    out: &mut Tensor<T>,
    argmax: &mut Vec<usize>,
) -> Result<(), KernelError> {
    let s = input.shape;
    let oshape = pool_output_shape(s, w)?;
    out.reshape_for(oshape);
    argmax.clear();
    argmax.resize(oshape.len(), 0);
    let src = input.as_slice();
    let dst = out.as_mut_slice();
    for c in 0..s.c {
        let cbase = c * s.plane();
        for oy in 0..oshape.h {
            let y0 = oy * w.stride;
            let y1 = (y0 + w.size).min(s.h);
            for ox in 0..oshape.w {
                let x0 = ox * w.stride;
                let x1 = (x0 + w.size).min(s.w);
                let mut best_i = cbase + y0 * s.w + x0;
                let mut best = src[best_i];
                for y in y0..y1 {
                    for x in x0..x1 {
                        let i = cbase + y * s.w + x;
                        if src[i] > best {
                            best = src[i];
                            best_i = i;
                        }
                    }
                }
                let o = (c * oshape.h + oy) * oshape.w + ox;
                dst[o] = best;
                argmax[o] = best_i;
            }
        }
    }
    Ok(())
}

pub fn maxpool2d<T: Scalar>(input: &Tensor<T>, w: Window) -> Result<(Tensor<T>, Vec<usize>), KernelError> {
    let mut out = Tensor::zeros(Shape::new(0, 0, 0));
    let mut argmax = Vec::new();
    maxpool2d_into(input, w, &mut out, &mut argmax)?;
    Ok((out, argmax))
}

/// Routes each upstream value to the input cell that won the forward max.
pub fn maxpool_backward<T: Scalar>(
    upstream: &Tensor<T>,
    argmax: &[usize],
    input_shape: Shape,
) -> Result<Tensor<T>, KernelError> {
    if upstream.shape.len() != argmax.len() {
        return Err(mismatch(format!(
            "upstream {} has {} cells, {} argmax entries recorded",
            upstream.shape,
            upstream.shape.len(),
            argmax.len()
        )));
    }
    let mut d = Tensor::zeros(input_shape);
    let data = d.as_mut_slice();
    for (&i, &g) in argmax.iter().zip(upstream.as_slice()) {
        let slot = data
            .get_mut(i)
            .ok_or_else(|| mismatch(format!("argmax {i} outside input {input_shape}")))?;
        *slot = *slot + g;
    }
    Ok(d)
}

pub fn activate_in_place<T: Scalar>(data: &mut [T], kind: ActivationKind) {
    match kind {
        ActivationKind::Linear => {}
        ActivationKind::Relu => data.iter_mut().for_each(|v| *v = v.max(T::zero())),
        ActivationKind::Leaky => {
            let slope = T::of(LEAKY_SLOPE);
            for v in data.iter_mut() {
                if *v <= T::zero() {
                    *v = *v * slope;
                }
            }
        }
    }
}

pub fn activate<T: Scalar>(t: &Tensor<T>, kind: ActivationKind) -> Tensor<T> {
    let mut out = t.clone();
    activate_in_place(out.as_mut_slice(), kind);
    out
}

/// Gradient through an activation, given the pre-activation input.
pub fn activate_backward<T: Scalar>(
    upstream: &Tensor<T>,
    pre_activation: &Tensor<T>,
    kind: ActivationKind,
) -> Result<Tensor<T>, KernelError> {
    if upstream.shape != pre_activation.shape {
        return Err(mismatch(format!("upstream {} vs input {}", upstream.shape, pre_activation.shape)));
    }
    let slope = match kind {
        ActivationKind::Linear => return Ok(upstream.clone()),
        ActivationKind::Relu => T::zero(),
        ActivationKind::Leaky => T::of(LEAKY_SLOPE),
    };
    let data = upstream
        .as_slice()
        .iter()
        .zip(pre_activation.as_slice())
        .map(|(&g, &x)| if x > T::zero() { g } else { g * slope })
        .collect();
    Ok(Tensor { shape: upstream.shape, data })
}

fn check_channel_params<T>(shape: Shape, params: &[&[T]]) -> Result<(), KernelError> {
    for p in params {
        if p.len() != shape.c {
            return Err(mismatch(format!("{} per-channel values for {} channels", p.len(), shape.c)));
        }
    }
    Ok(())
}

/// Per-channel `y = scale · (x − mean) / sqrt(var + eps)` in place.
pub fn batchnorm_in_place<T: Scalar>(
    t: &mut Tensor<T>,
    scales: &[T],
    means: &[T],
    variances: &[T],
    eps: T,
) -> Result<(), KernelError> {
    check_channel_params(t.shape, &[scales, means, variances])?;
    let plane = t.shape.plane();
    for (c, chunk) in t.as_mut_slice().chunks_exact_mut(plane).enumerate() {
        let factor = scales[c] / (variances[c] + eps).sqrt();
        let mean = means[c];
        for v in chunk {
            *v = (*v - mean) * factor;
        }
    }
    Ok(())
}

pub fn batchnorm_infer<T: Scalar>(
    t: &Tensor<T>,
    scales: &[T],
    means: &[T],
    variances: &[T],
    eps: T,
) -> Result<Tensor<T>, KernelError> {
    let mut out = t.clone();
    batchnorm_in_place(&mut out, scales, means, variances, eps)?;
    Ok(out)
}

pub fn add_bias_in_place<T: Scalar>(t: &mut Tensor<T>, bias: &[T]) -> Result<(), KernelError> {
    check_channel_params(t.shape, &[bias])?;
    let plane = t.shape.plane();
    for (chunk, &b) in t.as_mut_slice().chunks_exact_mut(plane).zip(bias) {
        chunk.iter_mut().for_each(|v| *v = *v + b);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(h: usize, w: usize, v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(Shape::new(1, h, w), v).unwrap()
    }

    #[test]
    fn identity_pointwise_conv() {
        let x = Tensor::<f64>::from_fn(Shape::new(1, 3, 5), |_, y, x| (y * 5 + x) as f64 - 4.0);
        let out = conv2d(&x, &[1.0], Some(&[0.0]), 1, Window::new(1, 1, 0)).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn all_ones_same_padding() {
        let x = t1(3, 3, vec![1.0; 9]);
        let out = conv2d(&x, &[1.0; 9], None, 1, Window::new(3, 1, 1)).unwrap();
        assert_eq!(out.as_slice(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn strided_conv_shape() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 4, 4));
        let out = conv2d(&x, &[0.0; 27], None, 3, Window::new(3, 2, 1)).unwrap();
        assert_eq!(out.shape(), Shape::new(3, 2, 2));
    }

    #[test]
    fn conv_rejects_wrong_kernel() {
        let x = Tensor::<f32>::zeros(Shape::new(2, 4, 4));
        assert!(matches!(
            conv2d(&x, &[0.0; 9], None, 1, Window::new(3, 1, 1)),
            Err(KernelError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn pool_max_of_window() {
        let x = t1(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let (out, arg) = maxpool2d(&x, Window::new(2, 2, 0)).unwrap();
        assert_eq!(out.as_slice(), &[4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn trailing_pad_pool_keeps_grid() {
        let x = Tensor::<f32>::from_fn(Shape::new(2, 13, 13), |c, y, x| (c + y * x) as f32);
        let (out, _) = maxpool2d(&x, Window::new(2, 1, 1)).unwrap();
        assert_eq!(out.shape(), Shape::new(2, 13, 13));
        // bottom-right corner only sees itself
        assert_eq!(out.get(1, 12, 12), x.get(1, 12, 12));
    }

    #[test]
    fn padded_cells_never_win() {
        let x = t1(3, 3, vec![-5.0; 9]);
        let (out, _) = maxpool2d(&x, Window::new(2, 1, 1)).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == -5.0));
    }

    #[test]
    fn constant_pool_picks_top_left() {
        let x = t1(4, 4, vec![2.0; 16]);
        let (out, arg) = maxpool2d(&x, Window::new(2, 2, 0)).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 2.0));
        assert_eq!(arg, vec![0, 2, 8, 10]);
    }

    #[test]
    fn activations() {
        let x = t1(1, 3, vec![-2.0, 0.0, 3.0]);
        let leaky = activate(&x, ActivationKind::Leaky);
        assert!((leaky.as_slice()[0] + 0.2).abs() < 1e-15);
        assert_eq!(leaky.as_slice()[2], 3.0);
        let neg = t1(1, 3, vec![-1.0, -2.0, -0.5]);
        assert!(activate(&neg, ActivationKind::Relu).as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(activate(&x, ActivationKind::Linear), x);
    }

    #[test]
    fn leaky_backward_slope() {
        let x = t1(1, 2, vec![-1.0, 2.0]);
        let g = t1(1, 2, vec![3.0, 3.0]);
        let d = activate_backward(&g, &x, ActivationKind::Leaky).unwrap();
        assert!((d.as_slice()[0] - 0.3).abs() < 1e-15);
        assert_eq!(d.as_slice()[1], 3.0);
    }

    #[test]
    fn batchnorm_scalar() {
        let x = t1(1, 1, vec![3.0]);
        let y = batchnorm_infer(&x, &[2.0], &[1.0], &[3.999999], 1e-6).unwrap();
        assert!((y.as_slice()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_identity_and_constant() {
        let x = Tensor::<f32>::from_fn(Shape::new(2, 3, 3), |c, y, x| (c as f32 - 1.0) * (y + x) as f32);
        let y = batchnorm_infer(&x, &[1.0; 2], &[0.0; 2], &[1.0; 2], 1e-6).unwrap();
        for (a, b) in x.as_slice().iter().zip(y.as_slice()) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
        let k = Tensor::<f32>::filled(Shape::new(1, 2, 2), 7.5);
        let z = batchnorm_infer(&k, &[3.0], &[7.5], &[2.0], 1e-6).unwrap();
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batchnorm_rejects_wrong_lengths() {
        let x = Tensor::<f32>::zeros(Shape::new(2, 1, 1));
        assert!(batchnorm_infer(&x, &[1.0], &[0.0; 2], &[1.0; 2], 1e-6).is_err());
    }

    #[test]
    fn identity_conv_backward() {
        let x = Tensor::<f64>::from_fn(Shape::new(1, 3, 3), |_, y, x| (y + 2 * x) as f64);
        let g = Tensor::<f64>::from_fn(Shape::new(1, 3, 3), |_, y, x| (x * 3 + y) as f64 - 1.5);
        let grads = conv2d_backward(&g, &x, &[1.0], 1, Window::new(1, 1, 0)).unwrap();
        assert_eq!(grads.input, g);
    }

    #[test]
    fn maxpool_backward_routes_to_argmax() {
        let x = t1(2, 2, vec![1.0, 9.0, 3.0, 4.0]);
        let (_, arg) = maxpool2d(&x, Window::new(2, 2, 0)).unwrap();
        let d = maxpool_backward(&t1(1, 1, vec![5.0]), &arg, x.shape()).unwrap();
        assert_eq!(d.as_slice(), &[0.0, 5.0, 0.0, 0.0]);
    }

    #[test]
    fn pool_pad_must_be_below_size() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 4, 4));
        assert!(maxpool2d(&x, Window::new(2, 1, 2)).is_err());
    }
}
