//! Dense-tensor network engine: layer specs, kernels, reverse-mode gradients.

mod layers;
mod network;
mod ops;

pub use layers::{ArchConfig, LayerKind, LayerSpec, ModelState, Pathway};
pub use network::{check_gradient, forward, Session};
