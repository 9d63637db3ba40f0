//! Articulator segmentation of real-time vocal-tract MRI with phonological
//! priors and audio conditioning.
//!
//! The numeric core is generic over [`Scalar`] (`f32` for training, `f64`
//! for gradient checks); aliases below fix the training precision.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod dataio;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod phonology;
pub mod priorgen;
pub mod scalar;
pub mod segmodel;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
