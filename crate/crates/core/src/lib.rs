//! Prompt-conditioned set-prediction detector at toy scale.
//!
//! Text phrases, example boxes or learned embeddings become concept
//! prompts; a hybrid encoder fuses them into a multi-scale feature
//! pyramid and a query decoder predicts boxes scored against each prompt.
//! Training-only heads live in [`aux`]. Synthetic shape scenes and AP
//! evaluation are in [`world`]; the three training regimes in [`train`]
//! and [`pipeline`].

pub mod ablation;
pub mod aux;
pub mod boxes;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoders;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod hybrid;
pub mod io;
pub mod matching;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod prompts;
pub mod train;
pub mod world;

pub use conceptdet_tensor as tensor;
pub use error::{Error, Result};
