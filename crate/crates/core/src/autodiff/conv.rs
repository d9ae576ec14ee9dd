//! Convolution kernels (cross-correlation, zero padding) lowered to GEMM via
//! im2col/col2im.

use super::tensor::{Real, Tensor};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        Self { stride, dilation, padding }
    }

    fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.dilation == 0 {
            return Err(invalid!("stride and dilation must be >= 1, got {self:?}"));
        }
        Ok(())
    }

    /// `floor((n + 2p - d(k-1) - 1) / s) + 1`, or `None` when the dilated
    /// kernel does not fit.
    pub fn out_extent(&self, n: usize, k: usize) -> Option<usize> {
        if n == 0 || k == 0 {
            return None;
        }
        let span = self.dilation * (k - 1) + 1;
        let padded = n + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }

    /// Spatial extent produced by the transposed operator.
    pub fn transpose_extent(&self, n: usize, k: usize) -> Option<usize> {
        if n == 0 || k == 0 {
            return None;
        }
        let full = (n - 1) * self.stride + self.dilation * (k - 1) + 1;
        full.checked_sub(2 * self.padding).filter(|&v| v > 0)
    }
}

/// Geometry of one lowered image: `c` channels of `h x w` against a
/// `kh x kw` kernel, producing an `ho x wo` grid.
#[derive(Debug, Clone, Copy)]
struct Lowering {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    g: ConvGeom,
}

impl Lowering {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.g.stride == 1 && self.g.padding == 0
    }

    /// Column range `[lo, hi)` of output positions whose input column
    /// `ow*s + off` is inside the image.
    fn valid_cols(&self, off: isize) -> (usize, usize) {
        let s = self.g.stride as isize;
        let w = self.w as isize;
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = if w - off <= 0 { 0 } else { ((w - off) + s - 1) / s };
        let lo = (lo as usize).min(self.wo);
        (lo, (hi as usize).clamp(lo, self.wo))
    }

    /// `cols[(ci,ki,kj), (oh,ow)] = src[ci, oh*s + ki*d - p, ow*s + kj*d - p]`
    fn im2col<T: Real>(&self, src: &[T], cols: &mut [T]) {
        let Lowering { c, h, w, kh, kw, ho, wo, g } = *self;
        let (s, d, p) = (g.stride as isize, g.dilation as isize, g.padding as isize);
        let mut row = 0;
        for ci in 0..c {
            let plane = &src[ci * h * w..(ci + 1) * h * w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                    let off = kj as isize * d - p;
                    let (lo, hi) = self.valid_cols(off);
                    for oh in 0..ho {
                        let out = &mut dst[oh * wo..(oh + 1) * wo];
                        let ih = oh as isize * s + ki as isize * d - p;
                        if ih < 0 || ih >= h as isize {
                            out.fill(T::zero());
                            continue;
                        }
                        let line = &plane[ih as usize * w..(ih as usize + 1) * w];
                        out[..lo].fill(T::zero());
                        out[hi..].fill(T::zero());
                        if hi == lo {
                            continue;
                        }
                        if s == 1 {
                            let start = (lo as isize + off) as usize;
                            out[lo..hi].copy_from_slice(&line[start..start + (hi - lo)]);
                        } else {
                            for (ow, v) in out[lo..hi].iter_mut().enumerate() {
                                *v = line[((ow + lo) as isize * s + off) as usize];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatter-add columns back into `dst`.
    fn col2im<T: Real>(&self, cols: &[T], dst: &mut [T]) {
        let Lowering { c, h, w, kh, kw, ho, wo, g } = *self;
        let (s, d, p) = (g.stride as isize, g.dilation as isize, g.padding as isize);
        let mut row = 0;
        for ci in 0..c {
            let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    let off = kj as isize * d - p;
                    let (lo, hi) = self.valid_cols(off);
                    for oh in 0..ho {
                        let ih = oh as isize * s + ki as isize * d - p;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let line = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                        let input = &src[oh * wo..(oh + 1) * wo];
                        if hi == lo {
                            continue;
                        }
                        if s == 1 {
                            let start = (lo as isize + off) as usize;
                            let span = &mut line[start..start + (hi - lo)];
                            for (acc, &v) in span.iter_mut().zip(&input[lo..hi]) {
                                *acc += v;
                            }
                        } else {
                            for ow in lo..hi {
                                line[(ow as isize * s + off) as usize] += input[ow];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn check_bias<T: Real>(bias: &Tensor<T>, channels: usize) -> Result<()> {
    if bias.shape() != [channels] {
        return Err(Error::Shape(format!(
            "bias shape {:?} does not match {channels} output channels",
            bias.shape()
        )));
    }
    Ok(())
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad<T: Real>(dy: &[T], channels: usize, plane: usize, db: &mut [T]) {
    for (i, chunk) in dy.chunks(plane).enumerate() {
        db[i % channels] += chunk.iter().copied().sum::<T>();
    }
}

/// Shapes of a conv2d call: kernel is `(out, in, kh, kw)`.
fn conv2d_lowering<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    g: ConvGeom,
) -> Result<(Lowering, usize, usize)> {
    g.validate()?;
    let (n, c, h, w) = input.dims4()?;
    let (co, ci, kh, kw) = kernel.dims4()?;
    if ci != c {
        return Err(Error::Shape(format!(
            "conv2d: input {:?} has {c} channels but kernel {:?} expects {ci}",
            input.shape(),
            kernel.shape()
        )));
    }
    let (ho, wo) = match (g.out_extent(h, kh), g.out_extent(w, kw)) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(Error::Shape(format!(
                "conv2d: kernel {:?} with {g:?} does not fit input {:?}",
                kernel.shape(),
                input.shape()
            )))
        }
    };
    Ok((Lowering { c, h, w, kh, kw, ho, wo, g }, n, co))
}

pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    g: ConvGeom,
) -> Result<Tensor<T>> {
    let (low, n, co) = conv2d_lowering(input, kernel, g)?;
    check_bias(bias, co)?;
    let (in_len, out_len) = (low.c * low.h * low.w, co * low.cols());
    let mut out = vec![T::zero(); n * out_len];
    let scratch = if low.is_pointwise() { 0 } else { low.rows() * low.cols() };
    T::with_scratch(scratch, |cols| {
        for b in 0..n {
            let x = &input.data()[b * in_len..(b + 1) * in_len];
            let lowered: &[T] = if low.is_pointwise() {
                x
            } else {
                low.im2col(x, cols);
                cols
            };
            let y = &mut out[b * out_len..(b + 1) * out_len];
            T::gemm(co, low.rows(), low.cols(), T::one(), kernel.data(), false, lowered, false, T::zero(), y);
            add_bias(y, bias.data(), low.cols());
        }
    });
    Tensor::new(vec![n, co, low.ho, low.wo], out)
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    g: ConvGeom,
    dy: &[T],
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let (low, n, co) = conv2d_lowering(input, kernel, g)?;
    let (in_len, out_len) = (low.c * low.h * low.w, co * low.cols());
    let mut dx = need[0].then(|| vec![T::zero(); input.numel()]);
    let mut dk = need[1].then(|| vec![T::zero(); kernel.numel()]);
    let mut db = need[2].then(|| vec![T::zero(); co]);
    T::with_scratch(low.rows() * low.cols(), |cols| {
        for b in 0..n {
            let x = &input.data()[b * in_len..(b + 1) * in_len];
            let dyb = &dy[b * out_len..(b + 1) * out_len];
            if let Some(dk) = dk.as_mut() {
                let lowered: &[T] = if low.is_pointwise() {
                    x
                } else {
                    low.im2col(x, cols);
                    cols
                };
                T::gemm(co, low.cols(), low.rows(), T::one(), dyb, false, lowered, true, T::one(), dk);
            }
            if let Some(dx) = dx.as_mut() {
                let dxb = &mut dx[b * in_len..(b + 1) * in_len];
                if low.is_pointwise() {
                    T::gemm(low.rows(), co, low.cols(), T::one(), kernel.data(), true, dyb, false, T::zero(), dxb);
                } else {
                    T::gemm(low.rows(), co, low.cols(), T::one(), kernel.data(), true, dyb, false, T::zero(), cols);
                    low.col2im(cols, dxb);
                }
            }
            if let Some(db) = db.as_mut() {
                bias_grad(dyb, co, low.cols(), db);
            }
        }
    });
    Ok(ConvGrads { input: dx, kernel: dk, bias: db })
}

/// Shapes of a transposed convolution: kernel is `(in, out, kh, kw)`; the
/// lowering describes the *output* image against the input grid.
fn conv_transpose_lowering<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    g: ConvGeom,
) -> Result<(Lowering, usize, usize)> {
    g.validate()?;
    let (n, c, h, w) = input.dims4()?;
    let (ci, co, kh, kw) = kernel.dims4()?;
    if ci != c {
        return Err(Error::Shape(format!(
            "conv2d_transpose: input {:?} has {c} channels but kernel {:?} expects {ci}",
            input.shape(),
            kernel.shape()
        )));
    }
    let (ho, wo) = match (g.transpose_extent(h, kh), g.transpose_extent(w, kw)) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(Error::Shape(format!(
                "conv2d_transpose: kernel {:?} with {g:?} yields an empty output from input {:?}",
                kernel.shape(),
                input.shape()
            )))
        }
    };
    Ok((Lowering { c: co, h: ho, w: wo, kh, kw, ho: h, wo: w, g }, n, c))
}

pub fn conv_transpose2d_forward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    g: ConvGeom,
) -> Result<Tensor<T>> {
    let (low, n, ci) = conv_transpose_lowering(input, kernel, g)?;
    check_bias(bias, low.c)?;
    let (in_len, out_len) = (ci * low.cols(), low.c * low.h * low.w);
    let mut out = vec![T::zero(); n * out_len];
    T::with_scratch(low.rows() * low.cols(), |cols| {
        for b in 0..n {
            let x = &input.data()[b * in_len..(b + 1) * in_len];
            let y = &mut out[b * out_len..(b + 1) * out_len];
            T::gemm(low.rows(), ci, low.cols(), T::one(), kernel.data(), true, x, false, T::zero(), cols);
            low.col2im(cols, y);
            add_bias(y, bias.data(), low.h * low.w);
        }
    });
    Tensor::new(vec![n, low.c, low.h, low.w], out)
}

pub fn conv_transpose2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    g: ConvGeom,
    dy: &[T],
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let (low, n, ci) = conv_transpose_lowering(input, kernel, g)?;
    let (in_len, out_len) = (ci * low.cols(), low.c * low.h * low.w);
    let mut dx = need[0].then(|| vec![T::zero(); input.numel()]);
    let mut dk = need[1].then(|| vec![T::zero(); kernel.numel()]);
    let mut db = need[2].then(|| vec![T::zero(); low.c]);
    T::with_scratch(low.rows() * low.cols(), |cols| {
        for b in 0..n {
            let x = &input.data()[b * in_len..(b + 1) * in_len];
            let dyb = &dy[b * out_len..(b + 1) * out_len];
            if dx.is_some() || dk.is_some() {
                low.im2col(dyb, cols);
            }
            if let Some(dx) = dx.as_mut() {
                let dxb = &mut dx[b * in_len..(b + 1) * in_len];
                T::gemm(ci, low.rows(), low.cols(), T::one(), kernel.data(), false, cols, false, T::zero(), dxb);
            }
            if let Some(dk) = dk.as_mut() {
                T::gemm(ci, low.cols(), low.rows(), T::one(), x, false, cols, true, T::one(), dk);
            }
            if let Some(db) = db.as_mut() {
                bias_grad(dyb, low.c, low.h * low.w, db);
            }
        }
    });
    Ok(ConvGrads { input: dx, kernel: dk, bias: db })
}
