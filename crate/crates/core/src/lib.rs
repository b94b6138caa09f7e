//! Rank convolution filters by how anomalous their gradient saliency is.
//!
//! Each filter's saliency profile (mean absolute loss gradient over its
//! parameters) is compared to a reference distribution collected on held-out
//! data. Two scores are provided: the classic z-score and a peaks-over-
//! threshold tail probability backed by a generalized Pareto fit. A small
//! built-in CNN and synthetic dataset let the rankings be evaluated by
//! filter pruning and one-step fine-tuning.

pub mod cnn;
pub mod data;
pub mod error;
pub mod eval;
pub mod evt;
pub mod profiles;
pub mod rank;
pub mod tail;
pub mod train;

pub use error::{Error, Result};
