//! Small end-to-end driving networks trained by imitation on a synthetic
//! closed-track simulator.
//!
//! The crate bundles a minimal tensor library with hand-written backward passes
//! ([`tensor`], [`layers`], [`recurrent`]), the FCN / SqueezeFCN / F-RFCN /
//! baseline architectures ([`models`]), the Adam training loop and checkpoint
//! format ([`training`]), episode files and windowing ([`data`]), the simulator
//! and closed-loop evaluation ([`sim`]), convergence-rate metrics ([`metrics`]),
//! and the command-line front end ([`cli`]).

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod recurrent;
pub mod sim;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
