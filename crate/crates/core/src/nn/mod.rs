//! Tensors, reverse-mode autodiff and the layer primitives the encoder is
//! built from.

pub mod functional;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod linalg;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;

pub use graph::Graph;
pub use ops::conv::ConvGeometry;
pub use params::{ParamGroup, ParamId, ParamKind, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
