//! Dense `f64` tensors, tape autodiff and vector statistics.

mod graph;
mod metrics;
mod tensor;

pub use graph::{AttentionShape, Gradients, Graph, Var};
pub use metrics::{cosine_similarity, l2_norm, l2_norm_slice, rmsd};
pub(crate) use metrics::{cosine_slice, rmsd_slice, sum_sq};
pub use tensor::Tensor;
