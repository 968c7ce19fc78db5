//! Discrete-event simulation of stream scheduling across an edge-to-cloud
//! continuum, the static placement policies and a DQN agent that switches
//! between them.

pub mod agent;
pub mod catalog;
pub mod error;
pub mod features;
pub mod policies;
pub mod sim;
pub mod topology;
pub mod workload;

pub use error::{Error, Result};
