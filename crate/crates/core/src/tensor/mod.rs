//! Minimal dense numeric layer: row-major matrices, a gradient tape with
//! analytic backward passes, a parameter store, and a finite-difference
//! gradient checker.

mod gradcheck;
mod matrix;
mod params;
mod tape;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, ParamCheck};
pub use matrix::Tensor;
pub use params::{Grads, ParamId, ParamStore};
pub use tape::{Tape, Var, LAYER_NORM_EPS};
