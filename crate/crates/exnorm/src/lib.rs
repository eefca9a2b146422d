//! Normalization-layer laboratory.
//!
//! The crate bundles a minimal reverse-mode tensor core, the classic feature
//! normalizers (batch, instance, layer, group), two learned-mixture schemes
//! on top of them (a dataset-global switchable mixture and a per-sample
//! mixture driven by a small ratio subnetwork), a desk-scale trainer, an
//! architecture parameter/FLOP auditor, and per-sample mixture-ratio
//! recording and export.

pub mod arch;
pub mod checkpoint;
pub mod en;
pub mod error;
pub mod normalizers;
pub mod params;
pub mod gradcheck;
pub mod micro;
pub mod graph;
pub mod ratios;
pub mod scalar;
pub mod sn;
pub mod tensor;
pub mod trainer;

pub use error::{ExnError, Result};
pub use graph::{Graph, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;
