//! Gloss-free sign language translation at desk scale.

pub mod adapters;
pub mod decoder;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod pseudo_gloss;
pub mod sign_encoder;
pub mod spatial;
pub mod synthdata;

pub use error::{Error, Result};
