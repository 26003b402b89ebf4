//! Dense-array math, reverse-mode differentiation and training primitives
//! shared by every neural component.

mod adam;
mod array;
pub mod check;
mod checkpoint;
mod graph;
mod nn;
pub mod rng;

pub use adam::{AdamConfig, AdamState, StepReport};
pub use array::{Array, Grads, ParamId, ParamStore};
pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use graph::{log_sigmoid, log_sum_exp, softmax, Gradients, Graph, NodeId};
pub use nn::{dropout, init_params, lstm_step, mlp, Affine, LstmParams, MlpParams, Mode, INIT_SCALE};
