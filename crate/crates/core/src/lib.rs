//! Video virtual try-on ablation framework: synthetic data, person representations, cloth
//! warping, a try-on composition U-Net with optional self-attention and optical-flow blending,
//! reconstruction losses, quality metrics, and a reproducible training/evaluation harness.
//!
//! Numeric code is generic over [`Scalar`] (`f32` for training, `f64` for gradient checks);
//! the aliases below fix the common choices.

pub mod dataset;
pub mod flow;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod person;
pub mod scalar;
pub mod tensor;
pub mod tryon;
pub mod warp;

pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = harness::Model<f32>;
pub type Model64 = harness::Model<f64>;
pub type Trainer32 = harness::Trainer<f32>;
pub type Trainer64 = harness::Trainer<f64>;
pub type VideoSample32 = dataset::VideoSample<f32>;
pub type WarpedCloth32 = warp::WarpedCloth<f32>;
