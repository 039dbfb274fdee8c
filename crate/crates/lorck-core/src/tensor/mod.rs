//! Dense row-major tensors and reverse-mode automatic differentiation.
//!
//! [`Tensor`] is the universal value type: a contiguous row-major buffer plus
//! a shape. Tensors are immutable once built; clones share the buffer. All
//! differentiable computation goes through a [`Tape`], which records every
//! operation and replays it in reverse on [`Tape::backward`].
//!
//! The element type is generic over [`Element`]: `f32` for training, `f64`
//! for gradient verification against finite differences.

mod ops_basic;
mod ops_conv;
mod ops_norm;
mod ops_temporal;
mod tape;

pub use ops_conv::convolve_image;
pub use ops_norm::BatchNormState;
pub use tape::{Tape, Var};

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

/// Scalar element of a tensor: `f32` or `f64`.
pub trait Element:
    Copy
    + PartialOrd
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    /// Dtype code in the binary tensor format (0 = f32, 1 = f64).
    const DTYPE: u8;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, other: Self) -> Self;
    fn minimum(self, other: Self) -> Self;

    /// C := alpha * A @ B + beta * C with explicit (row, col) strides per
    /// operand; thin wrapper over the platform gemm kernels.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    /// Sample from N(0, 1).
    fn std_normal<R: Rng>(rng: &mut R) -> Self;
}

impl Element for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: u8 = 0;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn maximum(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn minimum(self, other: Self) -> Self {
        f32::min(self, other)
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        (rsa, csa): (isize, isize),
        b: &[f32],
        (rsb, csb): (isize, isize),
        beta: f32,
        c: &mut [f32],
        (rsc, csc): (isize, isize),
    ) {
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
                c.as_mut_ptr(), rsc, csc,
            );
        }
    }

    fn std_normal<R: Rng>(rng: &mut R) -> Self {
        let n: f64 = rand_distr::StandardNormal.sample(rng);
        n as f32
    }
}

impl Element for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: u8 = 1;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn maximum(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn minimum(self, other: Self) -> Self {
        f64::min(self, other)
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        (rsa, csa): (isize, isize),
        b: &[f64],
        (rsb, csb): (isize, isize),
        beta: f64,
        c: &mut [f64],
        (rsc, csc): (isize, isize),
    ) {
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
                c.as_mut_ptr(), rsc, csc,
            );
        }
    }

    fn std_normal<R: Rng>(rng: &mut R) -> Self {
        rand_distr::StandardNormal.sample(rng)
    }
}

/// Dense n-dimensional array, contiguous row-major. Cheap to clone.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
}

impl<E: Element> Tensor<E> {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "Tensor::from_vec",
                format!("shape {:?} wants {} elements, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![E::ZERO; n]) }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: E) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![value; n]) }
    }

    pub fn scalar(value: E) -> Self {
        Tensor { shape: vec![1], data: Arc::new(vec![value]) }
    }

    /// Independent N(mu, sigma^2) samples.
    pub fn normal<R: Rng>(shape: impl Into<Vec<usize>>, mu: f64, sigma: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let dist = Normal::new(mu, sigma).expect("sigma must be finite and positive");
        let data = (0..n).map(|_| E::from_f64(dist.sample(rng))).collect();
        Tensor { shape, data: Arc::new(data) }
    }

    /// Kaiming-uniform fan-in initialization: U(-b, b) with b = sqrt(3) * gain / sqrt(fan_in),
    /// gain for a PReLU-family nonlinearity with slope `a`.
    pub fn kaiming_uniform<R: Rng>(
        shape: impl Into<Vec<usize>>,
        fan_in: usize,
        slope: f64,
        rng: &mut R,
    ) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let gain = (2.0 / (1.0 + slope * slope)).sqrt();
        let bound = 3f64.sqrt() * gain / (fan_in.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let data = (0..n).map(|_| E::from_f64(dist.sample(rng))).collect();
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// Mutate-in-place when uniquely owned, else copy-on-write.
    pub fn make_mut(&mut self) -> &mut [E] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn reshaped(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::shape(
                "Tensor::reshaped",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor { shape, data: Arc::clone(&self.data) })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data) }
    }

    /// Element-wise cast to another precision.
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        let data = self.data.iter().map(|&v| F::from_f64(v.to_f64())).collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data) }
    }

    /// Bitwise equality of shape and data.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_f64().to_bits() == b.to_f64().to_bits())
    }
}

/// Geometry of a 2-D convolution: stride, dilation and symmetric padding per
/// spatial axis. The output extent is
/// `H' = floor((H + 2p - d*(K-1) - 1) / s) + 1` and must be positive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: (usize, usize),
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec { stride: (1, 1), dilation: (1, 1), padding: (0, 0) }
    }
}

impl ConvSpec {
    pub fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        ConvSpec { stride: (stride, stride), dilation: (dilation, dilation), padding: (padding, padding) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::invalid("ConvSpec", "stride must be positive"));
        }
        if self.dilation.0 == 0 || self.dilation.1 == 0 {
            return Err(Error::invalid("ConvSpec", "dilation must be positive"));
        }
        Ok(())
    }

    pub(crate) fn geometry(&self) -> ConvGeom {
        ConvGeom {
            stride: self.stride,
            dilation: self.dilation,
            pad: ((self.padding.0, self.padding.0), (self.padding.1, self.padding.1)),
        }
    }
}

/// Internal convolution geometry with possibly asymmetric padding, used to
/// realize exact "same" output extents for even kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    /// ((top, bottom), (left, right))
    pub pad: ((usize, usize), (usize, usize)),
}

impl ConvGeom {
    /// Padding totalling `d*(K-1)` per axis, split (floor, ceil). Yields
    /// `out = ceil(H / s)`: extent preserved at stride 1, halved at stride 2,
    /// for any kernel size and dilation.
    pub fn same(kernel: (usize, usize), stride: (usize, usize), dilation: (usize, usize)) -> Self {
        let split = |total: usize| (total / 2, total - total / 2);
        let pad_h = split(dilation.0 * (kernel.0 - 1));
        let pad_w = split(dilation.1 * (kernel.1 - 1));
        ConvGeom { stride, dilation, pad: (pad_h, pad_w) }
    }

    pub fn out_extent(&self, input: (usize, usize), kernel: (usize, usize)) -> Result<(usize, usize)> {
        let one = |h: usize, k: usize, s: usize, d: usize, (pb, pa): (usize, usize)| -> Result<usize> {
            let span = d * (k - 1) + 1;
            let padded = h + pb + pa;
            if padded < span {
                return Err(Error::invalid(
                    "conv2d",
                    format!("kernel span {} exceeds padded extent {}", span, padded),
                ));
            }
            Ok((padded - span) / s + 1)
        };
        Ok((
            one(input.0, kernel.0, self.stride.0, self.dilation.0, self.pad.0)?,
            one(input.1, kernel.1, self.stride.1, self.dilation.1, self.pad.1)?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_element_count() {
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn output_extent_formula() {
        // 100x100 input, 40x40 kernel, stride 1, pad 0 -> 61x61
        let g = ConvSpec::new(1, 1, 0).geometry();
        assert_eq!(g.out_extent((100, 100), (40, 40)).unwrap(), (61, 61));
        // dilation widens the span: 8x8 input, 3x3 kernel, dilation 2, pad 2 -> 8x8
        let g = ConvSpec { stride: (1, 1), dilation: (2, 2), padding: (2, 2) }.geometry();
        assert_eq!(g.out_extent((8, 8), (3, 3)).unwrap(), (8, 8));
    }

    #[test]
    fn same_geometry_preserves_and_halves() {
        for (k, d) in [(3usize, 1usize), (4, 3), (10, 2), (20, 1), (10, 1), (40, 1), (3, 4)] {
            let g = ConvGeom::same((k, k), (1, 1), (d, d));
            assert_eq!(g.out_extent((64, 64), (k, k)).unwrap(), (64, 64), "k={} d={}", k, d);
            let g2 = ConvGeom::same((k, k), (2, 2), (d, d));
            assert_eq!(g2.out_extent((64, 64), (k, k)).unwrap(), (32, 32), "k={} d={}", k, d);
        }
    }

    #[test]
    fn kernel_larger_than_padded_input_rejected() {
        let g = ConvSpec::new(1, 1, 0).geometry();
        assert!(g.out_extent((3, 3), (5, 5)).is_err());
    }
}
