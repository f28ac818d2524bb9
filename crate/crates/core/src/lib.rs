//! Collaborative Android malware detection: fingerprints, a small neural
//! network engine, feature-specific model zoo, pseudo-label consensus,
//! base/head transfer, federated aggregation with guard models, and the
//! poisoning attacks the guards defend against.

pub mod attacks;
pub mod consensus;
pub mod error;
pub mod federation;
pub mod fingerprint;
pub mod harness;
pub mod nn;
pub mod transfer;
mod wire;
pub mod zoo;

pub use error::{AdamError, Result};
