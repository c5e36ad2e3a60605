//! Miniature models, synthetic data, training protocol, metrics and CLI
//! plumbing.

pub mod checkpoint;
pub mod config;
pub mod detector;
pub mod hena;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod synth;
pub mod train;
