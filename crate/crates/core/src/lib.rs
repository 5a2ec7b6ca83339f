//! Next-step prediction over course-navigation trajectories.
//!
//! The crate covers the whole pipeline: turning raw navigation logs into
//! padded token sequences ([`ingest`]), a small reverse-mode
//! differentiation engine ([`graph`]), stacked LSTM and causal Transformer
//! predictors with optional input/output weight tying ([`models`]), Adam
//! training with a confidence-penalized loss and early stopping
//! ([`training`]), accuracy and timing reports ([`evaluation`]), and Markov
//! chain corpora with known entropy rates for end-to-end checks
//! ([`synth`]).

pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod ingest;
pub mod kernels;
pub mod models;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use rng::RngState;
pub use tensor::Tensor;
