//! Tensor storage, a reverse-mode tape, and gradient verification.

pub(crate) mod gemm;
pub mod gradcheck;
mod ops;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCase, GradCheckError, GradCheckReport};
pub use ops::{AttnPattern, RopeTable};
pub use params::{ParamId, ParamStore};
pub use tape::{ExecMode, Gradients, NumericsError, Pass, Primitive, Tape, Var};
pub use tensor::Tensor;
