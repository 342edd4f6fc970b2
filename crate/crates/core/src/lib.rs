//! Stability-diversity balanced decision operator on a differentiable tape,
//! with a synthetic graph-navigation task for training and evaluation.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod backbone;
pub mod config;
pub mod error;
pub mod eval;
pub mod expansion;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod params;
pub mod regularizer;
pub mod selection;
pub mod spcr;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod types;
pub mod world;

pub use error::{Result, SdbError};
