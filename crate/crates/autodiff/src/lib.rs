//! Tape-based reverse-mode differentiation for dense `f64` tensors, with an
//! adjoint pass that builds ordinary graph nodes. Gradients are expressions,
//! so norms of gradients (and their derivatives) cost nothing special.

pub mod graph;
pub mod nn;

pub use graph::{Graph, PatchGeom1d, PatchGeom2d, Var};
