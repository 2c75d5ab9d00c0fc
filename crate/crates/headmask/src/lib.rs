//! Training and analysis of transformers with gated attention heads.
//!
//! Every attention head of an encoder-decoder transformer carries a scalar
//! gate in {0, 1}. The gradient of the loss with respect to a gate is the
//! head's importance score; training can mask heads at random or mask the
//! currently most important ones; the analysis harness sweeps masks over a
//! trained model and reports how quality degrades.

pub mod analysis;
pub mod bleu;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod importance;
pub mod model;
pub mod plot;
pub mod rng;
pub mod runconfig;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
