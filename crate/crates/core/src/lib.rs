// `!(x > 0.0)` is used on purpose to reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod diffeo;
pub mod error;
pub mod estimator;
pub mod evaluate;
pub mod harmonics;
pub mod io;
pub mod roughness;
pub mod simulate;
pub mod sphere;

pub use error::{Error, Result};
