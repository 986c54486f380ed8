//! Plaintext side of the private-inference stack: fixed-point ring tensors,
//! Gaussian-fitted polynomial ReLU approximations, a small manual-backprop
//! network library and the ReLU-replacement trainer.
//!
//! The real-valued modules are generic over [`Real`] (f32 or f64); the aliases
//! below fix the scalar to f64, which is what the runtime uses.

pub mod autorep;
pub mod dapa;
pub mod data;
pub mod fixnum;
pub mod nn;
pub mod real;
pub mod tensor;

pub use fixnum::{FixedConfig, FixedError, ProductOp, RingTensor};
pub use real::Real;
pub use tensor::{numel, Tensor};

pub type RealTensor = Tensor<f64>;
pub type Model64 = nn::Model<f64>;
pub type Dataset64 = data::Dataset<f64>;
pub type PolyCoeffs64 = dapa::PolyCoeffs<f64>;
pub type ChannelPolys64 = dapa::ChannelPolys<f64>;
pub type ChannelStats64 = dapa::ChannelStats<f64>;
pub type GaussianStats64 = dapa::GaussianStats<f64>;
pub type Activation64 = autorep::AutoRepActivation<f64>;
pub type IndicatorState64 = autorep::IndicatorState<f64>;
pub type ReplacementPlan64 = autorep::ReplacementPlan<f64>;
