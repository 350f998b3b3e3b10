//! Attention-aware social graph transformer for multimodal trajectory
//! prediction.
//!
//! The pipeline turns observed agent positions into a per-frame social graph,
//! packs it into constant-resolution pseudo-images, optionally reweights the
//! adjacency with attention, runs spatio-temporal graph convolution, and
//! extrapolates with a transformer whose output is a bivariate Gaussian over
//! each future displacement.

pub mod attn_adj;
pub mod data_io;
pub mod diffarray;
pub mod error;
pub mod gauss_head;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod sstg;
pub mod sstgcn;
pub mod trainer;
pub mod txf;

pub use error::{Error, Result};
