//! Dense tensors and the reverse-mode tape used by every other module.

mod conv;
mod ops;
mod tape;
#[allow(clippy::module_inception)]
mod tensor;

pub use ops::{sigmoid, BatchStats, NormMode};
pub use tape::{Activation, BinaryKind, PoolKind, Tape, UnaryKind, Var};
pub use tensor::Tensor;
