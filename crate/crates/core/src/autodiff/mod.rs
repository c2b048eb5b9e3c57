//! Dense reverse-mode differentiation over row-major matrices.

mod graph;
mod tensor;

pub use graph::{Gradients, Graph, NodeId, Op};
pub use tensor::{Scalar, Tensor};

pub(crate) use graph::sigmoid;

/// Records `kind` applied to `inputs` on `graph`.
pub fn forward_op<T: Scalar>(graph: &mut Graph<T>, kind: Op, inputs: &[NodeId]) -> crate::Result<NodeId> {
    graph.apply(kind, inputs)
}
