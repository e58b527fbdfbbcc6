//! Discriminator-guided reverse-KL fine-tuning for LSTM language models,
//! verified end to end on an exactly solvable synthetic trigram world.
//!
//! The toolkit covers the full procedure: train a language model with
//! cross-entropy, train a discriminator that tells model samples from data,
//! reconstruct the data distribution from its outputs via the density ratio
//! `p_hat = q0 (1 - r) / r`, and fine-tune the model against the estimated
//! cross-entropy + reverse-KL objective. Because the synthetic world's
//! distribution is known exactly, every quantity — perplexities, KL terms,
//! the gradient-direction claims — can be checked against ground truth.
//!
//! Conventions used throughout:
//! - word ids are 1-based (`1..=V`); id 0 is the sentence-start marker;
//! - probability rows, logits and output biases are 0-based with word `w`
//!   at index `w - 1`;
//! - every sentence is the start token plus exactly ten words;
//! - all numerics are f64, log-probabilities go through log-sum-exp, and
//!   probabilities are floored at 1e-12 before any logarithm.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod nncore;
pub mod objectives;
pub mod pipeline;
pub mod propcheck;

pub use error::{Error, Result};
