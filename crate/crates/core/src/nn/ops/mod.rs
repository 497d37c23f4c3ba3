//! Differentiable operations, implemented as methods on [`Tape`](super::tape::Tape).

pub mod activation;
pub mod attention;
pub mod basic;
pub mod conv;
pub mod linear;
pub mod norm;
pub mod shape;
