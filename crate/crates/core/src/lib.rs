//! Joint training of a classifier and a ranking-based loss estimator, plus
//! ODIN-style out-of-distribution scoring and detection metrics.
//!
//! The crate is `no_std` (with `alloc`); file formats, the CLI and the
//! end-to-end pipeline live in the `lossguard` companion crate.
//!
//! Layout:
//!
//! - [`tensor`] and [`diff`]: dense tensors and a reverse-mode tape that
//!   differentiates with respect to parameters *and* inputs.
//! - [`nets`]: the predictor trunk with tap points and the loss estimator fed
//!   by those taps.
//! - [`losses`]: weighted cross-entropy, the pairwise ranking hinge, the mse
//!   baseline and the combined objective.
//! - [`training`]: weighted sampling, Adam, the step schedule and the joint
//!   training loop.
//! - [`odin`]: temperature-scaled confidence, gradient-sign perturbation and
//!   grid tuning.
//! - [`metrics`]: threshold-sweep detection metrics and classification scores.
//! - [`synthdata`]: deterministic synthetic inliers and OOD variants.
//! - [`bench`]: assembles the standard benchmark splits from one root seed.

#![cfg_attr(not(feature = "std"), no_std)]
// Index loops mirror the math in several kernels.
#![allow(clippy::needless_range_loop)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod bench;
pub mod diff;
mod error;
pub(crate) mod math;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod odin;
pub mod seed;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
