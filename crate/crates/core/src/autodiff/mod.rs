//! Tape-based reverse-mode differentiation, dense layers and Adam.

mod adam;
mod mlp;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use mlp::{forward_mlp, BoundMlp, MlpParams};
pub use tape::{gaussian_log_pdf, logsumexp, CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::softplus_scalar;
