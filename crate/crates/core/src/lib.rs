//! Feature-space class-incremental learning: adapter finetuning with
//! incremental merging, Gaussian class models, local classifier alignment,
//! bound diagnostics and accuracy/robustness metrics.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common instantiations.

pub mod config;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod features;
pub mod gaussian;
pub mod lca;
pub mod linalg;
pub mod merge;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod scalar;

pub(crate) mod checkpoint;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use scalar::Scalar;

pub type ParamVectorF64 = nn::ParamVector<f64>;
pub type ParamVectorF32 = nn::ParamVector<f32>;
pub type MlpF64 = nn::Mlp<f64>;
pub type MlpF32 = nn::Mlp<f32>;
pub type ClassGaussianF64 = gaussian::ClassGaussian<f64>;
pub type GaussianBankF64 = gaussian::GaussianBank<f64>;
pub type GaussianBankF32 = gaussian::GaussianBank<f32>;
pub type MergeStateF64 = merge::MergeState<f64>;
pub type MergeStateF32 = merge::MergeState<f32>;
pub type TaskVectorF64 = merge::TaskVector<f64>;
pub type ClassifierF64 = pipeline::ProgressiveClassifier<f64>;
pub type PipelineStateF64 = pipeline::PipelineState<f64>;
pub type PipelineStateF32 = pipeline::PipelineState<f32>;
