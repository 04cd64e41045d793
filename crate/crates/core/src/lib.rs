//! Out-of-distribution detection under long-tailed class imbalance.
//!
//! The crate has two halves that meet at a classifier's logits:
//!
//! - Training: [`dne`] implements the dual-normalized energy objective
//!   (class-wise and sample-wise hinge losses on batch-normalized energies)
//!   with analytic gradients, and [`nn`] trains a small MLP with it.
//! - Inference: [`doda`] adapts an outlier energy distribution online from
//!   test samples that an offline Z-score filter flags as OOD, and uses it to
//!   calibrate per-sample energy scores.
//!
//! [`energy`] holds the scoring algebra both halves share, [`data`] the
//! synthetic long-tailed task and file formats, [`metrics`] the evaluation
//! metrics, and [`pipeline`] the end-to-end experiments driven by the CLI.

pub mod data;
pub mod dne;
pub mod doda;
pub mod energy;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod pipeline;

pub use error::{Error, Result};
