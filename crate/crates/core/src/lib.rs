// Negated comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod datagen;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod trainer;

pub use error::{DadaError, Result};
