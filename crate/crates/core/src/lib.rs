//! Split-federated training for U-shaped networks.
//!
//! The network is cut into a client-side head and tail and a server-side
//! body, so every encoder/decoder skip connection stays on the client that
//! owns the data. Clients train in parallel against per-client body
//! replicas; an aggregation server averages head/tail weights, the
//! computation server averages bodies, and an optional drift correction
//! blends each round's average with a step away from (or toward) the
//! previous round's model.

pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fed;
pub mod metrics;
pub mod nn;
pub mod parties;
pub mod rng;
pub mod task;
pub mod tensor;
pub mod unet;
pub mod wire;

pub use error::{Error, Result};
pub use tensor::{ParamSet, Part, Tensor};
