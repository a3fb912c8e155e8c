//! noisegate: a desk-scale toolkit for studying backdoors in small image
//! classifiers. It injects backdoors through dataset poisoning, detects them
//! by combining adversarial multiplicative neuron noise with a feature-space
//! mask that decouples benign from suspect features, and removes them by
//! noise-guided fine-tuning.

pub mod attack;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decouple;
pub mod defense;
pub mod detect;
pub mod error;
pub mod model;
pub mod nc;
pub mod noise;
pub mod plot;
pub mod rng;
pub mod zoo;

#[doc(hidden)]
pub mod testutil;

pub use error::{Error, Result};
