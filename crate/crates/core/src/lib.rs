//! Fidelity-landscape toolkit for driven Ising spin chains.
//!
//! The crate covers the full pipeline: exact Schrödinger propagation of a
//! controlled spin chain (`spin`), second-order GRAPE data collection
//! (`grape`), dataset persistence and splitting (`dataset`), three surrogate
//! models of the infidelity landscape (`surrogates`), landscape-structure
//! measures and quantum-speed-limit estimation (`landscape`), and wall-time
//! benchmarking of exact versus surrogate evaluation (`bench`).

pub mod bench;
pub mod dataset;
pub mod error;
pub mod grape;
pub mod landscape;
pub mod optim;
pub mod rng;
pub mod spin;
pub mod surrogates;

pub use error::{AtlasError, Result};
pub use spin::{Boundary, Pulse, SpinChainSpec};
