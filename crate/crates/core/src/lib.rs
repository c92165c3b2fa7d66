//! Joint fingerprint presentation-attack detection and matching.
//!
//! A single network with a shared base and two task heads produces, for
//! every minutia-centred patch, a spoofness score and a 64-d descriptor.
//! Patch scores are averaged into an image-level liveness decision and
//! descriptors are compared by a rigid-consistency matcher.

pub mod bench;
pub mod data_io;
pub mod error;
pub mod exec;
pub mod matcher;
pub mod metrics;
pub mod nn;
pub mod patch;
pub mod pipeline;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use exec::Exec;
