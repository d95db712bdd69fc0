//! Federated semi-supervised learning with inter-client relation matching.
//!
//! A central server federates labeled clients (trained with cross-entropy)
//! and unlabeled clients (trained with consistency regularization plus a
//! symmetric-KL alignment between their class-relation matrices and the
//! aggregate relation matrix collected from labeled clients).
//!
//! Everything runs in-process and deterministically from a root seed.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod gradcheck;
pub mod metrics;
pub mod numerics;
pub mod relation;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
