//! Latent-variable models of multi-label enrollment sequences.
//!
//! The central model is a contextual mixture model: a time-indexed chain of
//! discrete hidden states whose transition and emission parameters differ at
//! every timestep. Binary enrollment vectors are relaxed to `{-1, +1}` so
//! each (timestep, state) emission is a multivariate normal, and the
//! probability of a binary pattern is recovered as an orthant probability.
//!
//! Modules:
//! - [`data`]: cohort ingestion, filtering, splitting and summaries
//! - [`gaussian`]: multivariate normal numerics and orthant estimators
//! - [`baselines`]: naive Bayes and tree-augmented naive Bayes mixtures
//! - [`cmm`]: the contextual mixture model
//! - [`eval`]: sample-quality, inference and novelty metrics
//! - [`model_file`]: versioned JSON persistence

pub mod baselines;
pub mod cmm;
pub mod data;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod model_file;
pub mod par;
pub mod scenario;
pub mod seed;

pub use error::{Error, Result};
