//! A small reverse-mode differentiation engine over batched tensors: the
//! parameter store, the recorded op graph, and the Adam optimizer.

mod adam;
mod graph;
mod params;

pub use adam::{Adam, AdamConfig};
pub use graph::{softmax_rows, Gradients, Graph, NodeId};
pub use params::{BnState, Param, ParamId, ParamStore, BN_EPS, BN_MOMENTUM};
