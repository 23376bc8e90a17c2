//! Scenario-guided multimodal adapter for natural language inference.
//!
//! The crate contains a small reverse-mode tensor engine ([`tensor`]), a
//! transformer encoder host ([`encoder`]), a frozen scenario featurizer
//! ([`scenario`]), the cross-modal adapter ([`adapter`]), a synthetic
//! scenario-NLI benchmark ([`dataset`]) and the training harness ([`train`]).

pub mod adapter;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod model;
pub mod nn;
pub mod params;
pub mod scenario;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
