//! Dense linear algebra, stable nonlinearities and gradient machinery.

pub mod gradcheck;
mod matrix;
pub mod ops;
pub mod tape;

pub use gradcheck::{finite_diff_check, GradCheckReport, ParamCheck};
pub use matrix::DenseMatrix;
pub use ops::{entropy_nats, softmax, softmax_rows, ProbVector};
pub use tape::{GradTape, Gradients, Var};
