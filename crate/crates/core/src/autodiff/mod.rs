//! Reverse-mode automatic differentiation over dense `f64` tensors, plus the
//! Adam optimizer, global-norm gradient clipping and the checkpoint format.

mod check;
mod checkpoint;
mod graph;
mod kernels;
mod optim;
mod tensor;

pub mod init;

pub use check::finite_difference_check;
pub use checkpoint::{Checkpoint, StoredTensor, FORMAT_VERSION};
pub use graph::{Gradients, Graph, Var};
pub use kernels::ConvGeometry;
pub use optim::{clip_global_norm, global_grad_norm, Adam, AdamConfig};
pub use tensor::{DiffTensor, ParamSet, Tensor};
