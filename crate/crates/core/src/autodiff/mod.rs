//! A small reverse-mode differentiation engine over dense `f64` tensors.

mod gradcheck;
mod init;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, FD_STEP, REL_FLOOR};
pub use init::trunc_normal;
pub use optim::{AdamConfig, AdamState, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub(crate) use tensor::gemm;
