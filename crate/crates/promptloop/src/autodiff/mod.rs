//! Differentiable tensor core: tape autodiff, finite-difference checking,
//! and Adam/AdamW optimizers. Generic over f32/f64; gradient checks run in
//! double precision.

mod check;
mod optim;
mod tape;
mod tensor;

pub use check::finite_diff_check;
pub use optim::{optim_step, OptimKind, OptimState};
pub use tape::{grad, Tape, Var};
pub use tensor::{matmul, matmul_nt, matmul_tn, Precision, Real, Tensor};
