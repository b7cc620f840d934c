//! Density-aware contrastive learning for semi-supervised segmentation.
//!
//! The crate is organized bottom-up: a small reverse-mode [`tensor`] engine,
//! embedding [`geometry`] (k-NN density and cluster compactness),
//! [`prototype`] extraction, per-class memory [`bank`]s, the density-guided
//! [`sampler`], the contrastive [`loss`], and the two-model [`cotrain`] loop.
//! [`synth`] generates toy scenes and [`metrics`] scores predictions.

pub mod bank;
pub mod cotrain;
pub mod error;
pub mod geometry;
pub mod loss;
pub mod metrics;
pub mod parallel;
pub mod prototype;
pub mod sampler;
pub mod synth;
pub mod tensor;

pub use error::{DaclError, Result};
