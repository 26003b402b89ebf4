//! Comparison systems: nonparametric Bayesian segmenters and the
//! surprisal-peak segmenter over a character LSTM.

mod base;
mod charlm;
mod crp;
mod heldout;
mod search;
mod surprisal;

pub use base::{BaseDist, Token};
pub use charlm::{CharLm, CharLmConfig};
pub use crp::{joint_logprob, AnnealSchedule, Counts, Hyper, ModelKind, Sampler};
pub use heldout::Predictor;
pub use search::{cartesian_grid, grid_search, GridRecord, SearchOutcome};
pub use surprisal::{surprisal_boundaries, surprisal_segment, SurprisalModel};
