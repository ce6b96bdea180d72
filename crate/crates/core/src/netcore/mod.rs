//! Differentiable building blocks: matrices, parameter sets, a reverse-mode
//! tape and a finite-difference gradient checker.

mod activation;
mod gradcheck;
mod matrix;
mod params;
mod tape;

pub use activation::{leaky_softmax, leaky_softmax_remainder, relu, sigmoid, softmax};
pub use gradcheck::{check_gradient, relative_error, GradCheckOptions, GradCheckReport, Worst};
pub use matrix::Matrix;
pub use params::{DenseParams, ParamPart, ParamSet};
pub use tape::{Tape, Var, PROB_CLAMP};
