//! Batch active learning for multinomial logistic regression by minimizing
//! the Fisher information ratio between a pool and a selected batch.
//!
//! The pipeline is: fit a model on the labeled set ([`model`]), build
//! per-point Fisher factors ([`fisher`]), solve the convex relaxation
//! ([`relax`]) and round it to a concrete batch ([`sparsify`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod bounds;
pub mod dataset;
pub mod embed;
pub mod error;
pub mod experiment;
pub mod fisher;
pub mod linalg;
pub mod model;
pub mod relax;
pub mod sparsify;
pub mod synth;

pub use error::{FiralError, Result};
pub use model::{LabeledExample, Pool, Theta};
