//! Difference-aware embedding personalization at desk scale.
//!
//! Reviews are embedded with a frozen hashing embedder, contrasted against
//! peer reviews of the same item, compressed by a sparse autoencoder and
//! injected as soft prompts into a small frozen byte-level transformer.

pub mod error;
pub mod hash;
pub mod metrics;
pub mod blob;
pub mod cli;
pub mod corpus;
pub mod diffrep;
pub mod embedder;
pub mod numerics;
pub mod projector;
pub mod sae;
pub mod toylm;
pub mod trainer;

pub use error::{Error, Result};
