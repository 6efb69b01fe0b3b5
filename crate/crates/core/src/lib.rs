//! Graph anomaly detection by counterfactual neighbor translation.
//!
//! A pointer network flags heterophilic nodes, a DDPM trained on hidden
//! node embeddings translates some of their neighbors towards an anomaly
//! reference, and a GAT classifier aggregates the translated neighborhoods.
//! Everything runs on a small f64 tensor type with tape-based autograd.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod plot;
pub mod pointer;
pub mod tensor;

pub use error::{Error, Result};
