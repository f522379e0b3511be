//! Learned optimizers meta-trained with flatness-aware regularizers.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod baselines;
pub mod error;
pub mod flatness;
pub mod harness;
pub mod learned_optimizer;
pub mod meta;
pub mod optimizees;
pub mod rng;

pub use autodiff::{GradResult, Graph, NodeRef};
pub use error::{Error, Result};
