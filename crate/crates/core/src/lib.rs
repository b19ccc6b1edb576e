//! Emotional voice conversion at desk scale: contrastive emotion encoders
//! trained with soft labels, a fusion encoder with an adaptive intensity
//! gate and a conditional flow-matching decoder, driven by a synthetic corpus
//! whose generative process is known exactly.

pub mod artifacts;
pub mod cfm;
pub mod checkpoint;
pub mod clap;
pub mod config;
pub mod corpus;
pub mod error;
pub mod fuencoder;
pub mod metrics;
pub mod pipeline;
pub mod run;
pub mod store;
pub mod vc;

pub use error::{CoreError, Result};
