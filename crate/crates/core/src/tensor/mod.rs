//! Dense row-major tensors over `f32`/`f64` and the reverse-mode tape.
//!
//! Layout convention: feature maps are channel-last `[B, H, W, C]`, sequences
//! are `[L, C]`. `data[..]` is contiguous row-major, so the channel axis is the
//! fastest-moving one and per-position channel vectors are contiguous slices.

mod ops_basic;
mod ops_conv;
pub(crate) mod ops_linear;
mod ops_loss;
mod ops_norm;
pub(crate) mod ops_shape;
pub mod checkpoint;
pub mod tape;

pub use ops_conv::ConvKind;
pub use ops_norm::BnUpdate;
pub use tape::{Grads, Tape, Var};

use crate::{Error, Result};

/// Scalar dtype tag. The u8 code is the on-disk checkpoint encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            c => Err(Error::Format(format!("unknown dtype code {c}"))),
        }
    }
}

/// Scalar element of a [`Tensor`]: `f32` or `f64`.
///
/// `exp` is the kernel exponential. For `f64` it is `f64::exp`. For `f32` it is
/// a branch-free polynomial (cephes-style range reduction, rel. error ~2e-7)
/// so hot scan loops stay autovectorizable; correctness suites run in `f64`
/// where `exp` is the libm one.
pub trait Element:
    Copy
    + Send
    + Sync
    + PartialOrd
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
    const DTYPE: Dtype;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn ln_1p(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maxv(self, o: Self) -> Self;
    fn minv(self, o: Self) -> Self;
    fn is_finite(self) -> bool;

    /// Logistic function, stable for large |x|.
    fn sigmoid(self) -> Self {
        if self >= Self::ZERO {
            Self::ONE / (Self::ONE + (-self).exp())
        } else {
            let e = self.exp();
            e / (Self::ONE + e)
        }
    }

    /// ln(1+e^x) with a linear branch for x > 20 to avoid overflow.
    fn softplus(self) -> Self {
        if self > Self::from_f64(20.0) {
            self
        } else {
            self.exp().ln_1p()
        }
    }
}

/// Cephes-style expf: 2^k * p(r) with r = x - k ln2 reduced in two parts.
/// Input is clamped to the finite range of f32 exponentials.
#[inline]
fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const C1: f32 = 0.693_359_375;
    const C2: f32 = -2.121_944_4e-4;
    let x = x.clamp(-87.3, 88.7);
    let k = (x * LOG2E).round();
    let r = x - k * C1 - k * C2;
    let mut p = 1.987_569_1e-4_f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5.000_000_1e-1;
    let z = p * r * r + r + 1.0;
    // 2^k via exponent bits; k ∈ [-126, 127] after the clamp above.
    let two_k = f32::from_bits(((k as i32 + 127) as u32) << 23);
    z * two_k
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        exp_f32(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn ln_1p(self) -> Self {
        f32::ln_1p(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn maxv(self, o: Self) -> Self {
        f32::max(self, o)
    }
    fn minv(self, o: Self) -> Self {
        f32::min(self, o)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

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
    fn ln_1p(self) -> Self {
        f64::ln_1p(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn maxv(self, o: Self) -> Self {
        f64::max(self, o)
    }
    fn minv(self, o: Self) -> Self {
        f64::min(self, o)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Dense N-dimensional array. `data.len() == product(shape)` always holds;
/// zero-extent axes are rejected at construction.
#[derive(Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} wants {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        assert!(shape.iter().all(|&d| d > 0), "zero extent in shape {shape:?}");
        Self { shape: shape.to_vec(), data: vec![E::ZERO; n] }
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(v);
        t
    }

    pub fn scalar(v: E) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> E) -> Self {
        let n: usize = shape.iter().product();
        assert!(shape.iter().all(|&d| d > 0), "zero extent in shape {shape:?}");
        Self { shape: shape.to_vec(), data: (0..n).map(|i| f(i)).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Row-major strides (innermost axis has stride 1).
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1usize; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.shape[i + 1];
        }
        s
    }

    pub fn at(&self, idx: &[usize]) -> E {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        let mut stride = 1;
        for (i, (&ix, &ext)) in idx.iter().zip(&self.shape).enumerate().rev() {
            debug_assert!(ix < ext, "index {ix} out of range {ext} on axis {i}");
            let _ = i;
            off += ix * stride;
            stride *= ext;
        }
        self.data[off]
    }

    pub fn set(&mut self, idx: &[usize], v: E) {
        let mut off = 0;
        let mut stride = 1;
        for (&ix, &ext) in idx.iter().zip(&self.shape).rev() {
            debug_assert!(ix < ext);
            off += ix * stride;
            stride *= ext;
        }
        self.data[off] = v;
    }

    /// Same data, new shape; extent product must match.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} values) to {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| F::from_f64(v.to_f64())).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Debug-mode guard for the everything-finite invariant.
    #[inline]
    pub fn debug_check_finite(&self, what: &str) {
        #[cfg(debug_assertions)]
        {
            assert!(self.all_finite(), "non-finite value after {what}");
        }
        #[cfg(not(debug_assertions))]
        let _ = what;
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

impl<E: Element> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} values]", self.data.len())
        }
    }
}

/// Fills a tensor with U(lo, hi) samples in a fixed element order.
pub fn fill_uniform<E: Element, R: rand::Rng>(t: &mut Tensor<E>, rng: &mut R, lo: f64, hi: f64) {
    for v in t.data_mut() {
        *v = E::from_f64(rng.gen_range(lo..hi));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_row_major() {
        let t = Tensor::<f64>::zeros(&[2, 3, 4]);
        assert_eq!(t.strides(), vec![12, 4, 1]);
    }

    #[test]
    fn at_matches_linear_layout() {
        let t = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64);
        assert_eq!(t.at(&[1, 2]), 5.0);
        assert_eq!(t.at(&[0, 1]), 1.0);
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn fast_exp_f32_accuracy() {
        // Relative error of the polynomial exp stays near f32 roundoff over the
        // range kernels actually use (decay exponents are ≤ 0, gates small).
        for i in 0..2000 {
            let x = -40.0 + 80.0 * (i as f32) / 2000.0;
            let got = Element::exp(x) as f64;
            let want = (x as f64).exp();
            let rel = ((got - want) / want).abs();
            assert!(rel < 3e-7, "exp({x}) rel err {rel}");
        }
        assert_eq!(Element::exp(-200.0f32), 0.0f32.max(Element::exp(-200.0f32)));
        assert!(Element::exp(-200.0f32) < 1e-37);
    }

    #[test]
    fn sigmoid_softplus_stable() {
        assert!((f64::sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!((f64::softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(f64::sigmoid(-800.0) >= 0.0);
        assert_eq!(f64::softplus(1000.0), 1000.0);
        assert!(f32::softplus(30.0).is_finite());
    }
}
