//! Desk-scale conditional diffusion with per-timestep embedding
//! optimization (DATE), guidance baselines, ablations and theory checks on
//! analytically tractable models.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod alignment;
pub mod autodiff;
pub mod cli;
pub mod date;
pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod harness;
pub mod linalg;
pub mod models;
pub mod par;
pub mod rng;
pub mod task;
pub mod verification;

pub use error::{LabError, Result};
