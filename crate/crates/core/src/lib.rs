//! Deformation-aware adversarial training at desk scale: a small reverse-mode
//! differentiation engine, differentiable warps, an embedding model, losses,
//! the warp-parameter adversary, training and evaluation.

pub mod adversary;
pub mod data;
pub mod diff;
pub mod eval;
pub mod geometry;
pub mod gradsuite;
pub mod image;
pub mod losses;
pub mod model;
pub mod seeds;
pub mod train;
