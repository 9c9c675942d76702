//! Rotation-robust local feature learning with rotated kernel fusion (RKF).
//!
//! The crate contains a small deterministic tensor engine, the RKF layer and its
//! single-kernel re-parameterization, a toy detect-and-describe network, the
//! multi-oriented feature aggregation (MOFA) teacher, distillation losses and
//! training loops, synthetic data generation and file formats, and the
//! matching/evaluation harness.

pub mod distill;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod mofa;
pub mod net;
pub mod rkf;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
