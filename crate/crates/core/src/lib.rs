//! Continual federated learning with aggregated gradients: a deterministic
//! simulation engine for replay-based federated training over task streams.
//!
//! Clients run drift-corrected incremental aggregated gradient (IAG) steps on
//! their current task, the server mixes in a replay-memory gradient with
//! optionally adapted per-client rates, and every round reports the
//! forgetting diagnostics used to pick those rates.

pub mod cli;
pub mod client;
pub mod data;
pub mod datagen;
pub mod error;
pub mod experiments;
pub mod iag;
pub mod memory;
pub mod model;
pub mod params;
pub mod rng;
pub mod server;

pub use error::{Error, Result};
