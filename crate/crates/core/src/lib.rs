//! Desk-scale simulator of federated alternate training for semi-supervised
//! segmentation: supervised silos train on labels, unsupervised silos train
//! an online/target pair on mixup pseudo-labels, and the server alternates
//! aggregation between the two groups.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod loss;
pub mod model;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{FatError, Result};
