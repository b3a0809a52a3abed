//! Relational self-supervised distillation for compact copy-detection
//! descriptors, at desk scale.
//!
//! The crate trains small perceptron encoders with a weighted combination of
//! relational distillation (KL between similarity distributions over a teacher
//! queue), MoCo-style InfoNCE and a hard-negative loss, and evaluates them with
//! exact search, micro average precision, score normalization and
//! dimensional-collapse diagnostics on a synthetic copy corpus.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod losses;
pub mod memory;
pub mod numerics;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
