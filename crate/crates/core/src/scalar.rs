//! The floating-point abstraction every numeric routine in the crate is written against.

use ndarray::NdFloat;
use num_traits::FromPrimitive;
use std::iter::Sum;

/// A real scalar usable by the network, losses, warps and metrics.
///
/// Implemented for `f32` (training default) and `f64` (gradient checks and oracles).
pub trait Scalar: NdFloat + FromPrimitive + Sum + Default {
    /// Short name stored in checkpoints so a blob is never reloaded as the wrong width.
    const NAME: &'static str;

    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    /// Round to the nearest IEEE binary16 value (saturating to infinity on overflow).
    #[inline]
    fn round_half(self) -> Self {
        Self::lit(half::f16::from_f64(self.as_f64()).to_f64())
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn round_half(self) -> Self {
        half::f16::from_f32(self).to_f32()
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Standard normal CDF via the error function.
pub fn normal_cdf<T: Scalar>(x: T) -> T {
    T::lit(0.5 * (1.0 + libm::erf(x.as_f64() / std::f64::consts::SQRT_2)))
}

/// Standard normal density.
pub fn normal_pdf<T: Scalar>(x: T) -> T {
    let x = x.as_f64();
    T::lit((-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt())
}

/// Logistic sigmoid, evaluated without overflow for large |x|.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
