//! Unsupervised landmark discovery by conditional image generation.
//!
//! A detector turns images into `K` soft-argmax landmarks; a generator must
//! reconstruct a target image from the appearance of another image and the
//! target's landmark heatmaps alone. Training on pairs related by a synthetic
//! warp (intra-subject) and through an auxiliary image of another subject
//! (inter-subject) forces the landmarks to carry the geometry. A linear
//! regressor then maps discovered landmarks to annotated ones for evaluation.

pub mod cli;
pub mod config;
pub mod data_io;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod imaging;
pub mod nn;
pub mod objectives;
pub mod pipeline;
pub mod ops;
pub mod training;
pub mod visualize;
pub mod warp;

pub use error::{Error, Result};
pub use imaging::Image;
