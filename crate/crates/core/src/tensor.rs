//! Dense channel-height-width tensors and the kernels that operate on them.
//!
//! Every kernel is a pure function with a fixed loop nest, so results are
//! bit-reproducible from run to run. Kernels are generic over [`Element`]: the
//! ANN reference pass runs in `f32`, the spiking engine drives the same
//! kernels in `f64`.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar types the kernels accept.
pub trait Element: Float + Sum + Debug + Default + Send + Sync + 'static {}

impl Element for f32 {}
impl Element for f64 {}

/// Tensor extent, always (channels, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape {
            channels,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub const fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }
}

impl From<[usize; 3]> for Shape {
    fn from(v: [usize; 3]) -> Self {
        Shape::new(v[0], v[1], v[2])
    }
}

impl From<Shape> for [usize; 3] {
    fn from(s: Shape) -> Self {
        [s.channels, s.height, s.width]
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Dense real-valued tensor in row-major CHW order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "E: Serialize", deserialize = "E: Deserialize<'de>"))]
pub struct Tensor<E = f32> {
    shape: Shape,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    /// Build a tensor, checking the length and that every value is finite.
    pub fn new(shape: Shape, data: Vec<E>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(format!(
                "{} values supplied for shape {shape}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::shape(format!("non-finite value at index {i}")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![E::zero(); shape.len()],
        }
    }

    pub fn full(shape: Shape, value: E) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> E) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    data.push(f(c, y, x));
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> E {
        self.data[self.shape.index(c, y, x)]
    }

    pub fn channel(&self, c: usize) -> &[E] {
        let plane = self.shape.plane();
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Apply `f(channel, value)` to every element.
    pub fn map_channels(&self, f: impl Fn(usize, E) -> E) -> Self {
        let plane = self.shape.plane().max(1);
        Tensor {
            shape: self.shape,
            data: self.data.iter().enumerate().map(|(i, &v)| f(i / plane, v)).collect(),
        }
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| F::from(*v).expect("finite values always convert"))
                .collect(),
        }
    }

    /// Per-channel maximum; `-inf` for channels with an empty plane.
    pub fn channel_max(&self) -> Vec<E> {
        (0..self.shape.channels)
            .map(|c| self.channel(c).iter().fold(E::neg_infinity(), |m, &v| m.max(v)))
            .collect()
    }

    pub fn max_abs_diff(&self, other: &Tensor<E>) -> Result<E> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "cannot compare {} with {}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(E::zero(), |m, (a, b)| m.max((*a - *b).abs())))
    }
}

/// Non-negative integer tensor holding spike counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntTensor {
    shape: Shape,
    data: Vec<u32>,
}

impl IntTensor {
    pub fn zeros(shape: Shape) -> Self {
        IntTensor {
            shape,
            data: vec![0; shape.len()],
        }
    }

    pub fn new(shape: Shape, data: Vec<u32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(format!(
                "{} counts supplied for shape {shape}",
                data.len()
            )));
        }
        Ok(IntTensor { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u32] {
        &mut self.data
    }

    pub fn total(&self) -> u64 {
        self.data.iter().map(|&v| u64::from(v)).sum()
    }

    pub fn max(&self) -> u32 {
        self.data.iter().copied().max().unwrap_or(0)
    }
}

/// Four-dimensional convolution kernel.
///
/// For [`conv2d`] the dims are `(out_ch, in_ch, kh, kw)`; for
/// [`convtranspose2d`] they are `(in_ch, out_ch, kh, kw)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel<E = f32> {
    dims: [usize; 4],
    data: Vec<E>,
}

impl<E: Element> Kernel<E> {
    pub fn new(dims: [usize; 4], data: Vec<E>) -> Result<Self> {
        let len = dims.iter().product::<usize>();
        if data.len() != len {
            return Err(Error::shape(format!(
                "kernel {dims:?} needs {len} values, got {}",
                data.len()
            )));
        }
        if dims[2] == 0 || dims[3] == 0 {
            return Err(Error::shape("kernel spatial size must be positive"));
        }
        Ok(Kernel { dims, data })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    #[inline]
    pub fn index(&self, a: usize, b: usize, ky: usize, kx: usize) -> usize {
        ((a * self.dims[1] + b) * self.dims[2] + ky) * self.dims[3] + kx
    }

    pub fn get(&self, a: usize, b: usize, ky: usize, kx: usize) -> E {
        self.data[self.index(a, b, ky, kx)]
    }

    pub fn cast<F: Element>(&self) -> Kernel<F> {
        Kernel {
            dims: self.dims,
            data: self
                .data
                .iter()
                .map(|v| F::from(*v).expect("finite values always convert"))
                .collect(),
        }
    }

    /// Scale every weight by `f(a, b)` where `a`, `b` are the two channel dims.
    pub fn scale_channels(&self, f: impl Fn(usize, usize) -> E) -> Self {
        let [d0, d1, kh, kw] = self.dims;
        let taps = kh * kw;
        let mut data = self.data.clone();
        for a in 0..d0 {
            for b in 0..d1 {
                let s = f(a, b);
                let start = (a * d1 + b) * taps;
                for v in &mut data[start..start + taps] {
                    *v = *v * s;
                }
            }
        }
        Kernel { dims: self.dims, data }
    }
}

/// Output extent of a strided window sweep, or `None` if no window fits.
pub fn window_output(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution, or `None` if it is empty.
pub fn transposed_output(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || size == 0 {
        return None;
    }
    let full = (size - 1) * stride + kernel;
    full.checked_sub(2 * padding).filter(|&n| n >= 1)
}

/// Range of output positions `o` for which `o*stride + k - padding` lands in `[0, size)`.
#[inline]
fn valid_outputs(out: usize, size: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    // need o*stride + k >= padding and o*stride + k < size + padding
    let lo = if k >= padding {
        0
    } else {
        (padding - k).div_ceil(stride)
    };
    let limit = size + padding;
    let hi = if k >= limit {
        0
    } else {
        ((limit - k - 1) / stride + 1).min(out)
    };
    (lo.min(hi), hi)
}

/// Cross-correlation with zero padding.
pub fn conv2d<E: Element>(
    input: &Tensor<E>,
    weights: &Kernel<E>,
    bias: &[E],
    stride: usize,
    padding: usize,
) -> Result<Tensor<E>> {
    let [out_ch, in_ch, kh, kw] = weights.dims();
    let s = input.shape();
    if in_ch != s.channels {
        return Err(Error::shape(format!(
            "kernel expects {in_ch} input channels, input {s} has {}",
            s.channels
        )));
    }
    if bias.len() != out_ch {
        return Err(Error::shape(format!(
            "{} bias values for {out_ch} output channels",
            bias.len()
        )));
    }
    let (oh, ow) = match (
        window_output(s.height, kh, stride, padding),
        window_output(s.width, kw, stride, padding),
    ) {
        (Some(h), Some(w)) => (h, w),
        _ => {
            return Err(Error::shape(format!(
                "{kh}x{kw} kernel (stride {stride}, padding {padding}) does not fit input {s}"
            )))
        }
    };
    let out_shape = Shape::new(out_ch, oh, ow);
    let mut out = vec![E::zero(); out_shape.len()];
    let plane = oh * ow;
    let x_ranges: Vec<_> = (0..kw)
        .map(|kx| valid_outputs(ow, s.width, kx, stride, padding))
        .collect();
    for o in 0..out_ch {
        let dst = &mut out[o * plane..(o + 1) * plane];
        dst.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..in_ch {
            let src = input.channel(i);
            for ky in 0..kh {
                let (y0, y1) = valid_outputs(oh, s.height, ky, stride, padding);
                for kx in 0..kw {
                    let w = weights.get(o, i, ky, kx);
                    let (x0, x1) = x_ranges[kx];
                    for oy in y0..y1 {
                        let iy = oy * stride + ky - padding;
                        let row = &src[iy * s.width..(iy + 1) * s.width];
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        for ox in x0..x1 {
                            drow[ox] = drow[ox] + w * row[ox * stride + kx - padding];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor {
        shape: out_shape,
        data: out,
    })
}

/// Fractionally strided convolution (the adjoint of [`conv2d`]).
pub fn convtranspose2d<E: Element>(
    input: &Tensor<E>,
    weights: &Kernel<E>,
    bias: &[E],
    stride: usize,
    padding: usize,
) -> Result<Tensor<E>> {
    let [in_ch, out_ch, kh, kw] = weights.dims();
    let s = input.shape();
    if in_ch != s.channels {
        return Err(Error::shape(format!(
            "kernel expects {in_ch} input channels, input {s} has {}",
            s.channels
        )));
    }
    if bias.len() != out_ch {
        return Err(Error::shape(format!(
            "{} bias values for {out_ch} output channels",
            bias.len()
        )));
    }
    let (oh, ow) = match (
        transposed_output(s.height, kh, stride, padding),
        transposed_output(s.width, kw, stride, padding),
    ) {
        (Some(h), Some(w)) => (h, w),
        _ => {
            return Err(Error::shape(format!(
                "transposed {kh}x{kw} kernel (stride {stride}, padding {padding}) gives empty output for {s}"
            )))
        }
    };
    let out_shape = Shape::new(out_ch, oh, ow);
    let plane = oh * ow;
    let mut out = vec![E::zero(); out_shape.len()];
    for o in 0..out_ch {
        out[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v = bias[o]);
    }
    for i in 0..in_ch {
        let src = input.channel(i);
        for o in 0..out_ch {
            let dst = &mut out[o * plane..(o + 1) * plane];
            for iy in 0..s.height {
                for ky in 0..kh {
                    let y = iy * stride + ky;
                    if y < padding || y - padding >= oh {
                        continue;
                    }
                    let drow = &mut dst[(y - padding) * ow..(y - padding + 1) * ow];
                    for ix in 0..s.width {
                        let v = src[iy * s.width + ix];
                        for kx in 0..kw {
                            let x = ix * stride + kx;
                            if x < padding || x - padding >= ow {
                                continue;
                            }
                            drow[x - padding] = drow[x - padding] + v * weights.get(i, o, ky, kx);
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor {
        shape: out_shape,
        data: out,
    })
}

/// Per-channel window maximum. Padding cells are never selected.
pub fn maxpool2d<E: Element>(input: &Tensor<E>, kernel: usize, stride: usize, padding: usize) -> Result<Tensor<E>> {
    let s = input.shape();
    let (oh, ow) = match (
        window_output(s.height, kernel, stride, padding),
        window_output(s.width, kernel, stride, padding),
    ) {
        (Some(h), Some(w)) => (h, w),
        _ => {
            return Err(Error::shape(format!(
                "pool kernel {kernel} (stride {stride}, padding {padding}) larger than padded input {s}"
            )))
        }
    };
    let out_shape = Shape::new(s.channels, oh, ow);
    let mut out = Vec::with_capacity(out_shape.len());
    for c in 0..s.channels {
        let src = input.channel(c);
        for oy in 0..oh {
            let y0 = (oy * stride).saturating_sub(padding);
            let y1 = (oy * stride + kernel).saturating_sub(padding).min(s.height);
            for ox in 0..ow {
                let x0 = (ox * stride).saturating_sub(padding);
                let x1 = (ox * stride + kernel).saturating_sub(padding).min(s.width);
                if y0 >= y1 || x0 >= x1 {
                    return Err(Error::shape(format!("pool window at ({oy}, {ox}) covers only padding")));
                }
                let mut m = E::neg_infinity();
                for y in y0..y1 {
                    for &v in &src[y * s.width + x0..y * s.width + x1] {
                        m = m.max(v);
                    }
                }
                out.push(m);
            }
        }
    }
    Ok(Tensor {
        shape: out_shape,
        data: out,
    })
}

pub fn relu<E: Element>(input: &Tensor<E>) -> Tensor<E> {
    input.map(|v| v.max(E::zero()))
}

/// Concatenate along the channel axis in argument order.
pub fn concat_channels<E: Element>(inputs: &[&Tensor<E>]) -> Result<Tensor<E>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::shape("concat of zero tensors"))?
        .shape();
    let mut channels = 0;
    for t in inputs {
        let s = t.shape();
        if s.height != first.height || s.width != first.width {
            return Err(Error::shape(format!(
                "cannot concat {s} with {first}: spatial dims differ"
            )));
        }
        channels += s.channels;
    }
    let shape = Shape::new(channels, first.height, first.width);
    let mut data = Vec::with_capacity(shape.len());
    for t in inputs {
        data.extend_from_slice(t.data());
    }
    Ok(Tensor { shape, data })
}
