//! Desk-scale simulator for federated learning with iterative distribution
//! matching (FedDM).
//!
//! Clients learn small synthetic datasets whose class-wise embedding and logit
//! means match their local data around the current global weights; the server
//! trains on the pooled synthetic data inside a ρ-ball. The crate also carries
//! the FedAvg, FedProx and REAL baselines, Gaussian-mechanism calibration, and
//! message-size accounting.

pub mod accounting;
pub mod data;
pub mod distillation;
mod error;
pub mod federation;
pub mod models;
pub mod numerics;
pub mod privacy;
pub mod seeds;

pub use error::{Error, Result};
