//! Continuous decentralized federated learning for DNS-over-HTTPS tunnel
//! detection.
//!
//! Entities (one per DNS provider) train incremental classifiers on their
//! own flow batches and share models each round under one of four
//! federation scenarios: isolated training, a central aggregator, a full
//! peer-to-peer mesh, or push gossip to one random peer.

pub mod aggregation;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod features;
pub mod federation;
pub mod metrics;
pub mod models;

pub use data::{FlowRecord, Label};
pub use error::{Error, ErrorClass, Result};
