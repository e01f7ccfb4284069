//! Online multi-person pose tracking driven by a learned graph dynamics model.
//!
//! The crate is organized around a per-frame loop: a predictor extrapolates
//! every live tracklet one frame ahead, predictions are matched against
//! single-frame pose estimates with the Hungarian algorithm, matched heatmaps
//! are fused, and tracklet memory is updated FIFO-style. Synthetic articulated
//! sequences and a simulated estimator provide training and evaluation data,
//! with per-joint mAP and MOTA as the metrics.

pub mod assoc;
pub mod bench;
pub mod error;
pub mod filters;
pub mod gnn;
pub mod heatmap;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod synth;
pub mod tracker;
pub mod types;

pub use error::{Error, Result};
