//! Dense tensors, a reverse-mode tape, optimizers and checkpoints.

mod checkpoint;
mod float;
mod graph;
mod kernels;
mod optim;
mod param;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, MAGIC, VERSION};
pub use float::Float;
pub use graph::{log_softmax_rows, softmax_rows, GradientOverride, Gradients, Graph, Var, BN_EPS};
pub use optim::{sgd_update, AdamW, Optimizer, Sgd};
pub use param::{ParamId, ParamKind, ParamStore, Parameter};
pub use tensor::Tensor;
