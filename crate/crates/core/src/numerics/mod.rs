//! Dense tensors, a reverse-mode tape, and a finite-difference gradient oracle.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, ParamCheck, FD_STEP};
pub use tape::{Tape, Var};
pub use tensor::{ParamId, Parameter, Tensor};
