//! Dense `f64` tensors, a reverse-mode tape over the handful of operations
//! the retrieval model needs, and a finite-difference gradient checker.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use params::{GradBuf, Gradients, ParamSet, ParamStore, Parameter};
pub use tape::{CustomOp, GatherSource, Tape, Var};
pub use tensor::{dot, l2_normalize, max_pool_over_rows, norm, softmax_rows, Tensor2D};
