use crate::scalar::{normal_cdf, normal_pdf, sigmoid, Scalar};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Pointwise nonlinearities compared in the activation ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// x·Φ(x) with the exact normal CDF.
    Gelu,
    /// x·σ(x).
    Swish,
    /// sin(ω₀·x); ω₀ is supplied per layer.
    Sine,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown activation `{0}` (expected relu, gelu, swish or sine)")]
pub struct UnknownActivation(pub String);

impl FromStr for Activation {
    type Err = UnknownActivation;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "relu" => Ok(Self::Relu),
            "gelu" => Ok(Self::Gelu),
            "swish" | "silu" => Ok(Self::Swish),
            "sine" | "sin" | "siren" => Ok(Self::Sine),
            other => Err(UnknownActivation(other.to_string())),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Relu => "relu",
            Self::Gelu => "gelu",
            Self::Swish => "swish",
            Self::Sine => "sine",
        })
    }
}

pub struct ActivationCache<T> {
    input: Tensor<T>,
    omega: T,
}

impl Activation {
    pub const ALL: [Activation; 4] = [Self::Relu, Self::Gelu, Self::Swish, Self::Sine];

    #[inline]
    pub fn apply<T: Scalar>(self, x: T, omega: T) -> T {
        match self {
            Self::Relu => x.max(T::zero()),
            Self::Gelu => x * normal_cdf(x),
            Self::Swish => x * sigmoid(x),
            Self::Sine => (omega * x).sin(),
        }
    }

    /// Exact derivative; ReLU uses 0 at the origin.
    #[inline]
    pub fn derivative<T: Scalar>(self, x: T, omega: T) -> T {
        match self {
            Self::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Self::Gelu => normal_cdf(x) + x * normal_pdf(x),
            Self::Swish => {
                let s = sigmoid(x);
                s + x * s * (T::one() - s)
            }
            Self::Sine => omega * (omega * x).cos(),
        }
    }

    pub fn forward<T: Scalar>(self, x: Tensor<T>, omega: T) -> (Tensor<T>, ActivationCache<T>) {
        let y = x.map(|v| self.apply(v, omega));
        (y, ActivationCache { input: x, omega })
    }

    pub fn backward<T: Scalar>(self, cache: &ActivationCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let omega = cache.omega;
        cache.input.zip_map(dy, |x, g| g * self.derivative(x, omega))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_values() {
        let w = 30.0_f64;
        assert_eq!(Activation::Relu.apply(-2.0, w), 0.0);
        assert_eq!(Activation::Gelu.apply(0.0, w), 0.0);
        assert_eq!(Activation::Swish.apply(0.0, w), 0.0);
        assert_eq!(Activation::Sine.apply(0.0, w), 0.0);
        assert!((Activation::Gelu.apply(1.0, w) - 0.841_345).abs() < 1e-6);
        assert!((Activation::Swish.apply(1.0, w) - 0.731_059).abs() < 1e-6);
    }

    #[test]
    fn parse_round_trip() {
        for a in Activation::ALL {
            assert_eq!(a.to_string().parse::<Activation>().unwrap(), a);
        }
        assert!("tanh".parse::<Activation>().is_err());
    }
}
