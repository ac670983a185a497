//! Peer-to-peer federated continual learning on a ring of centers.
//!
//! The crate bundles a small CNN engine with exact gradients, the BCE + VSS segmentation loss,
//! Synaptic Intelligence regularization, a synthetic multi-center lesion dataset, lesion-level
//! metrics, and the ring schedules (isolated, single-visit, iterative, mixed) with their
//! communication ledger.

pub mod checkpoint;
pub mod error;
pub mod federation;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod patch;
pub mod scalar;
pub mod si;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Extent, Tensor};
