//! Reverse-mode differentiable kernels, parameters and optimizer.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, input_grad_check, relative_error, GradCheckReport};
pub use graph::{attention_pool_values, softmax_groups_values, BatchNormParams, Gradients, Graph, Mode, NodeId};
pub use params::{Adam, Init, ParamEntry, ParamId, ParameterStore};
pub use tensor::Tensor;
