//! Training-sequence optimization.
//!
//! Orderings of training batches ([`strategy::Strategy`]) are mapped into a
//! continuous space by a sequence autoencoder ([`model`]). A performance
//! predictor on that space is trained against measured learner accuracies
//! ([`learner`]); ascending its gradient and decoding yields new orderings
//! expected to train the learner better ([`pipeline`]).

pub mod error;
pub mod learner;
pub mod model;
pub mod pipeline;
pub mod strategy;

pub use error::{Result, TsoError};
