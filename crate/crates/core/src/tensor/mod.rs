//! Dense tensors with reverse-mode differentiation, limited to the
//! operations a transformer encoder-decoder needs.

mod array;
mod graph;
mod params;
mod scalar;

pub use array::Tensor;
pub use graph::{Graph, Var, MASK_SENTINEL};
pub use params::{accumulate_grads, NamedTensor, ParamId, ParamStore, Session};
pub use scalar::Scalar;

#[cfg(test)]
mod tests;
