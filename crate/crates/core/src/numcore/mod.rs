//! Deterministic dense numerics: tensors, seeded streams, softmax/top-k,
//! EMA statistics and the finite-difference gradient oracle.

mod finite_diff;
mod ops;
mod rng;
mod tensor;

pub use finite_diff::{finite_diff_grad, relative_error, DEFAULT_STEP};
pub use ops::{ema_update, logsumexp, softmax, softmax_slice, topk, topk_slice, EmaState};
pub use rng::{RngState, RngStream, StreamKind};
pub use tensor::{dot, global_norm, Tensor};
