//! Contrastive language-action-state pre-training on a synthetic block world.
//!
//! Behaviors (state-action trajectories) and captions are encoded into
//! Gaussian embeddings, aligned with a symmetric contrastive loss, and tied
//! to a prefix captioner, a closed-loop policy and a state-conditioned flow
//! prior over the shared space.

pub mod blockworld;
pub mod captioner;
pub mod datastore;
pub mod encoders;
pub mod error;
pub mod evalsuite;
pub mod generator;
pub mod prior;
pub mod substrate;
pub mod trainer;

pub use error::{ClaspError, Result};
