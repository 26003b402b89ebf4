//! Segmental neural language modelling for unsupervised word discovery.
//!
//! The crate trains a language model over unsegmented character streams that
//! marginalises over every segmentation with a semi-Markov forward pass,
//! generates each segment either character by character or in one step from
//! a lexical memory, and penalises long segments by their expected powered
//! length. Bayesian (DP / bigram HDP) and surprisal-peak segmenters are
//! included for comparison, together with bpc and token-F1 metrics.

pub mod baselines;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod lattice;
pub mod numeric;
pub mod par;
pub mod snlm;
pub mod train;

pub use error::{Error, Result};
