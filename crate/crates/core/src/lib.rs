//! Recurrent glimpse-based presentation attack detection.
//!
//! A convolutional backbone turns a face crop into a feature map. A global
//! branch pools the whole map while a reinforcement-learned agent picks `T`
//! local patches, encodes them and folds them into a GRU state. Both views are
//! fused and classified as bona fide or attack.
//!
//! Everything runs in `f64` on a small tape-based reverse-mode autodiff
//! ([`autograd`]) so gradients can be checked against finite differences.

pub mod autograd;
pub mod checkpoint;
pub mod compute;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod policy;
pub mod tensor;
pub mod training;
pub mod viz;

pub use error::{Error, Result};
