//! Dense row-major tensors and the raw (untracked) kernels behind the tape.
//!
//! Image-like tensors are channels-first: `[C, H, W]`. Convolution weights are
//! `[C_out, C_in, k, k]`. Scalars have shape `[]`.

use rand::Rng;

use crate::error::shape_err;
use crate::{Error, Real, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "Tensor::new",
                format!("shape {shape:?} holds {n} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64_lossy(rng.gen_range(lo..hi)))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn chw(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(shape_err(
                op,
                format!("expected [C,H,W], got {:?}", self.shape),
            )),
        }
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> T {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channels `range` of a `[C,H,W]` tensor.
    pub fn slice_channels(&self, range: std::ops::Range<usize>) -> Result<Self> {
        let (c, h, w) = self.chw("slice_channels")?;
        if range.start > range.end || range.end > c {
            return Err(shape_err(
                "slice_channels",
                format!("range {range:?} out of {c} channels"),
            ));
        }
        let plane = h * w;
        Ok(Self {
            shape: vec![range.len(), h, w],
            data: self.data[range.start * plane..range.end * plane].to_vec(),
        })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }
}

/// Geometry of a stride-1 "same" convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::EvenKernel(kernel));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::Invalid("conv channels must be positive".into()));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
        })
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn fan_out(&self) -> usize {
        self.out_channels * self.kernel * self.kernel
    }
}

/// Validates conv operands and returns their geometry plus spatial size.
pub(crate) fn conv_geometry<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<(ConvSpec, usize, usize)> {
    let (cin, h, w) = input.chw("conv2d")?;
    let (cout, wcin, kh, kw) = match *weights.shape() {
        [a, b, c, d] => (a, b, c, d),
        _ => {
            return Err(shape_err(
                "conv2d",
                format!("weights must be [C_out,C_in,k,k], got {:?}", weights.shape()),
            ))
        }
    };
    if kh != kw {
        return Err(shape_err("conv2d", format!("non-square kernel {kh}x{kw}")));
    }
    if kh % 2 == 0 {
        return Err(Error::EvenKernel(kh));
    }
    if wcin != cin {
        return Err(shape_err(
            "conv2d",
            format!("input has {cin} channels, weights expect {wcin}"),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(shape_err(
                "conv2d",
                format!("bias must be [{cout}], got {:?}", b.shape()),
            ));
        }
    }
    Ok((ConvSpec::new(cin, cout, kh)?, h, w))
}

/// Unfolds `[C,H,W]` into a `[C*k*k, H*W]` patch matrix with zero padding.
pub(crate) fn im2col<T: Real>(input: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let plane = h * w;
    let mut cols = vec![T::zero(); c * k * k * plane];
    for ci in 0..c {
        let src = &input[ci * plane..(ci + 1) * plane];
        for dy in 0..k {
            for dx in 0..k {
                let row = (ci * k + dy) * k + dx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let oy = dy as isize - pad;
                let ox = dx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-ox).max(0) as usize;
                    let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    let s = sy as usize * w;
                    let d = &mut dst[y * w + x0..y * w + x1];
                    let from = (s as isize + x0 as isize + ox) as usize;
                    d.copy_from_slice(&src[from..from + (x1 - x0)]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
pub(crate) fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let plane = h * w;
    let mut out = vec![T::zero(); c * plane];
    for ci in 0..c {
        let dst = &mut out[ci * plane..(ci + 1) * plane];
        for dy in 0..k {
            for dx in 0..k {
                let row = (ci * k + dy) * k + dx;
                let src = &cols[row * plane..(row + 1) * plane];
                let oy = dy as isize - pad;
                let ox = dx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-ox).max(0) as usize;
                    let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
                    let base = (sy as usize * w) as isize + ox;
                    for x in x0..x1 {
                        let t = (base + x as isize) as usize;
                        dst[t] = dst[t] + src[y * w + x];
                    }
                }
            }
        }
    }
    out
}

/// Stride-1 same-padded cross-correlation.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (spec, h, w) = conv_geometry(input, weights, bias)?;
    let plane = h * w;
    let mut out = vec![T::zero(); spec.out_channels * plane];
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_mut(plane).enumerate() {
            chunk.fill(b.data()[co]);
        }
    }
    let kk = spec.fan_in();
    if spec.kernel == 1 {
        T::gemm(spec.out_channels, kk, plane, weights.data(), false, input.data(), false, T::one(), &mut out);
    } else {
        let cols = im2col(input.data(), spec.in_channels, h, w, spec.kernel);
        T::gemm(spec.out_channels, kk, plane, weights.data(), false, &cols, false, T::one(), &mut out);
    }
    Tensor::new(&[spec.out_channels, h, w], out)
}

/// Gradients of [`conv2d`] with respect to input, weights and bias.
///
/// Input and weight gradients are only formed when requested.
pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weights: Option<Tensor<T>>,
    pub bias: Tensor<T>,
}

pub(crate) fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
    need_weights: bool,
) -> ConvGrads<T> {
    let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let cout = weights.shape()[0];
    let k = weights.shape()[2];
    let plane = h * w;
    let kk = cin * k * k;
    let g = grad_out.data();

    let db: Vec<T> = g.chunks(plane).map(|c| c.iter().copied().sum()).collect();

    let weights_grad = need_weights.then(|| {
        let mut dw = vec![T::zero(); cout * kk];
        if k == 1 {
            T::gemm(cout, plane, kk, g, false, input.data(), true, T::zero(), &mut dw);
        } else {
            let cols = im2col(input.data(), cin, h, w, k);
            T::gemm(cout, plane, kk, g, false, &cols, true, T::zero(), &mut dw);
        }
        Tensor::new(weights.shape(), dw).expect("weight shape")
    });
    let input_grad = need_input.then(|| {
        let mut dcols = vec![T::zero(); kk * plane];
        T::gemm(kk, cout, plane, weights.data(), true, g, false, T::zero(), &mut dcols);
        if k != 1 {
            dcols = col2im(&dcols, cin, h, w, k);
        }
        Tensor::new(input.shape(), dcols).expect("input shape")
    });
    ConvGrads {
        input: input_grad,
        weights: weights_grad,
        bias: Tensor::new(&[cout], db).expect("bias shape"),
    }
}

/// 2x2 max pooling, returning the flat argmax index per output element.
///
/// Ties resolve to the first element of the window in row-major order.
pub(crate) fn maxpool2<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (c, h, w) = input.chw("maxpool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::OddSpatial {
            op: "maxpool2",
            height: h,
            width: w,
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let d = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let base = (ci * h + 2 * y) * w + 2 * x;
                let mut best = base;
                for idx in [base + 1, base + w, base + w + 1] {
                    if d[idx] > d[best] {
                        best = idx;
                    }
                }
                out.push(d[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(&[c, oh, ow], out)?, arg))
}

pub(crate) fn upsample_nearest2<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = input.chw("upsample_nearest2")?;
    let (oh, ow) = (2 * h, 2 * w);
    let d = input.data();
    let mut out = vec![T::zero(); c * oh * ow];
    for ci in 0..c {
        for y in 0..oh {
            let src = &d[(ci * h + y / 2) * w..(ci * h + y / 2 + 1) * w];
            let dst = &mut out[(ci * oh + y) * ow..(ci * oh + y + 1) * ow];
            for (x, v) in dst.iter_mut().enumerate() {
                *v = src[x / 2];
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

pub(crate) fn upsample_backward<T: Real>(grad: &Tensor<T>, c: usize, h: usize, w: usize) -> Tensor<T> {
    let ow = 2 * w;
    let g = grad.data();
    let mut out = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for y in 0..2 * h {
            for x in 0..ow {
                let t = (ci * h + y / 2) * w + x / 2;
                out[t] = out[t] + g[(ci * 2 * h + y) * ow + x];
            }
        }
    }
    Tensor::new(&[c, h, w], out).expect("upsample grad shape")
}

pub(crate) fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ca, ha, wa) = a.chw("concat_channels")?;
    let (cb, hb, wb) = b.chw("concat_channels")?;
    if (ha, wa) != (hb, wb) {
        return Err(shape_err(
            "concat_channels",
            format!("spatial {ha}x{wa} vs {hb}x{wb}"),
        ));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(&[ca + cb, ha, wa], data)
}
