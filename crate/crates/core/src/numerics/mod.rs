//! Tensor values, reverse-mode differentiation, optimizers and the small
//! amount of dense linear algebra the heads need.

pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod optim;
pub mod tensor;

pub use graph::{sigmoid, Bound, Gradients, Graph, Var};
pub use linalg::{orthonormal_basis, project, project_residual, singular_values, RANK_TOLERANCE};
pub use optim::{adam_step, radam_step, sgd_step, OptimizerConfig, OptimizerKind, ParamSet};
pub use tensor::{argmax, dot, squared_distance, squared_norm, Tensor};

use crate::error::Result;

/// Mean softmax cross-entropy of one logit vector against `label`.
pub fn softmax_cross_entropy(graph: &Graph, logits: Var, label: usize) -> Result<Var> {
    graph.softmax_cross_entropy(logits, &[label])
}
