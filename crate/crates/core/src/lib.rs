//! Soft knowledge distillation for small encoder-decoder image restoration networks.
//!
//! A frozen teacher network guides a compressed student through three losses: pixel
//! reconstruction, a Gaussian-kernel distance between cross-attended feature maps, and
//! an image-level contrastive term. Everything runs on a small tape-based autodiff
//! engine ([`graph`]) over dense row-major tensors ([`tensor`]).
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); training and checkpoints
//! use `f64`. The `*64` / `*32` aliases below name the concrete instantiations.

pub mod attention;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{CheckpointError, Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph64 = graph::Graph<f64>;
pub type Graph32 = graph::Graph<f32>;
pub type FeatureMap64 = attention::FeatureMap<f64>;
pub type FeatureMap32 = attention::FeatureMap<f32>;
pub type RestorationNet64 = models::RestorationNet<f64>;
pub type RestorationNet32 = models::RestorationNet<f32>;
pub type ParamStore64 = models::ParamStore<f64>;
pub type ParamStore32 = models::ParamStore<f32>;
