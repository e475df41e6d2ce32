//! Network gradient descent: simulate decentralized estimation where every
//! client averages its in-neighbours' parameters and then takes a local
//! gradient step, and measure how far the result lands from the pooled fit.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod diagnostics;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod loss;
pub mod rng;
pub mod topology;

pub use error::{NgdError, Result};
