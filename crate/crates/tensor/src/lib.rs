//! Minimal CPU tensor engine: dense tensors, a reverse-mode autodiff tape,
//! im2col convolutions, optimizers and a checksummed array container.

mod broadcast;
pub mod container;
pub mod conv;
mod error;
pub mod functional;
mod graph;
pub mod optim;
mod params;
mod scalar;
mod tensor;

pub use container::{ArrayData, Container};
pub use error::{Result, TensorError};
pub use graph::{BatchStats, Gradients, Graph, Var};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{Binding, Param, ParamStore};
pub use scalar::Float;
pub use tensor::{numel, Tensor};
