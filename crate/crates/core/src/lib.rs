//! Safe exploration for learned-residual tracking control.
//!
//! A residual-dynamics model is learned by robust regression under covariate
//! shift; its predictive variance sizes a tracking tube around each candidate
//! trajectory, and only trajectories whose tube stays inside the safety set
//! are tracked.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod controller;
pub mod density_ratio;
pub mod domain;
pub mod dynamics;
pub mod error;
pub mod explore;
pub mod gp_baseline;
pub mod robust_regression;

pub use error::{Error, Result};
