//! Spike-driven residual spiking networks.
//!
//! The crate builds, trains and audits spiking ResNets whose residual joins
//! are bitwise (OR, AND, IAND) or additive, optionally equipped with
//! synergistic attention: binary promoting attention on the backbone and
//! binary inhibitory attention on shortcuts. Instrumentation covers spike
//! counts, firing rates, MAC/AC energy estimates and the detection and
//! removal of shortcuts that have fallen permanently silent.

pub mod arch;
pub mod attention;
pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod network;
pub mod neuron;
pub mod residual;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Element, SpikeTensor, Tensor};
