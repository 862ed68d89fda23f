//! Multimodal graph recommender engine.
//!
//! The pipeline purifies pre-extracted item features with a behaviour-driven
//! gate, propagates ID embeddings over the user-item graph and modality
//! features over frozen top-K item-item graphs, fuses modalities with a
//! preference-gated attention layer, and trains everything with BPR plus a
//! confidence-weighted circle loss.
//!
//! Module map:
//!
//! - [`dataset`]: interaction files, id encoding, per-user splits, feature files, synthetic fixtures
//! - [`sparse`]: CSR matrices and the bipartite graph builders
//! - [`graph`]: per-modality item-item kNN graphs
//! - [`autodiff`]: a small reverse-mode tape over dense matrices
//! - [`model`]: parameters, forward pass and checkpoints
//! - [`losses`]: BPR, embedding regularisation, circle loss
//! - [`train`]: negative sampling, AdamW, the epoch loop and gradient checking
//! - [`eval`]: top-K ranking, Recall/NDCG and paired bootstrap tests
//! - [`baselines`]: ItemKNN, BPR-MF and LightGCN
//! - [`experiment`]: run configuration and end-to-end experiment drivers

pub mod autodiff;
pub mod baselines;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod graph;
pub mod losses;
pub mod model;
pub mod sparse;
pub mod train;

mod rng;

pub use error::{Error, Result};
