//! Episodic metric learning for few-shot image classification.
//!
//! A four-block convolutional embedding and a learned pairwise scorer are
//! trained jointly on sampled few-shot tasks, then evaluated on classes never
//! seen during training by classifying queries against per-class centroids.

pub mod config;
pub mod data;
pub mod episodes;
pub mod evaluation;
pub mod error;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
