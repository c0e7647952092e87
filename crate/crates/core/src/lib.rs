//! Constrained linear MPC compiled into firing-rate neural networks.
//!
//! The pipeline runs plant → condensed QP → dual network, with alternative
//! realizations (multilayer factorizations, pruned and slack-augmented
//! networks) checked against a brute-force QP oracle in closed loop.

// `!(x > 0.0)` is used on purpose so that NaN parameters are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytics;
pub mod condenser;
pub mod controller;
pub mod error;
pub mod factorizer;
pub mod harness;
pub mod linalg;
pub mod network;
pub mod perturber;
pub mod plant;
pub mod qp_oracle;

pub use error::{Error, Result};
pub use linalg::{Mat, Vector};
