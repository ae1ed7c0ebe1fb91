//! Contrast-consistent ranking: unsupervised probes that recover an item
//! ordering from language-model activations, prompting baselines over
//! candidate-token logits, and direction-invariant ranking metrics.

pub mod activations;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod losses;
pub mod optim;
pub mod probe;
pub mod prompting;
pub mod task;
pub mod trainer;

pub use error::{Error, Result};
