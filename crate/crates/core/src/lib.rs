//! Unsupervised multiclass change segmentation for pairs of co-registered
//! 3D point clouds.
//!
//! A point-convolution backbone is trained by alternating two steps: deep
//! features of the second epoch are clustered with mini-batch k-means, and
//! the resulting pseudo-labels drive a weighted negative log-likelihood
//! through a prototype layer built from the centroids. After training the
//! pseudo-clusters are mapped to real change classes, either by a user or
//! automatically by majority vote against a reference labelling.
//!
//! Module map:
//!
//! - [`cloud`], [`spatial`]: point clouds, ASCII I/O, grid subsampling, k-d tree queries.
//! - [`synth`]: deterministic bi-temporal urban scenes with per-point change labels.
//! - [`features`]: the ten handcrafted per-point features.
//! - [`similarity`]: C2C / M3C2 based similarity flags for the contrastive term.
//! - [`cluster`]: mini-batch k-means, empty-cluster splitting, class weights, NMI.
//! - [`net`]: reverse-mode tensor engine, point convolution backbones, losses, SGD.
//! - [`trainer`]: the alternating clustering / training loop and tiled inference.
//! - [`evalmap`]: cluster-to-class mapping and segmentation metrics.

pub mod cloud;
pub mod cluster;
pub mod error;
pub mod evalmap;
pub mod features;
pub mod net;
pub mod similarity;
pub mod spatial;
pub mod synth;
pub mod trainer;

mod binio;

pub use error::{Error, Result};
