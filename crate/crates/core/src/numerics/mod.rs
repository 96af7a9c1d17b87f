//! Minimal differentiable-computation core: tensors, a reverse-mode tape,
//! the operator set used by both model stages, optimizers and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod tensor;

pub use checkpoint::{load_params, save_params};
pub use graph::{Graph, Var};
pub use optim::{adamw_step, OptimizerConfig, OptimizerKind, OptimizerState, StepReport};
pub use tensor::{ParameterStore, Tensor};
