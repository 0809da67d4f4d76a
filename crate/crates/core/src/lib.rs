//! Joint restoration of multimodal graph signals and learning of their twofold
//! graph: an unsigned spatial graph over sensor nodes and a signed graph over
//! modalities.
//!
//! The signal `X` (N nodes × M modalities) is modeled as matrix-normal with the
//! two Laplacians as row and column precisions. Restoration alternates three
//! convex sub-problems:
//!
//! * [`restore`]: a masked Sylvester system `μ L_s X L_m + M∘X = M∘Y` solved by CG,
//! * [`learn`]: Laplacian learning from a coupling kernel by primal-dual hybrid
//!   gradient, with a spectral sign surrogate for the signed modality graph,
//! * [`alt`]: the plain alternating solver built from the two.
//!
//! [`unrolled`] truncates the alternation to a fixed depth and trains the
//! per-layer step sizes and weights end to end with reverse-mode gradients
//! from [`autodiff`].

// NaN-rejecting guards are written as `!(x >= 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod alt;
pub mod autodiff;
pub mod baselines;
pub mod datasets;
pub mod error;
pub mod graph;
pub mod learn;
pub mod matrix;
pub mod metrics;
pub mod restore;
pub mod rng;
pub mod signal;
pub mod unrolled;

pub use error::{Error, Result};
pub use matrix::Mat;
