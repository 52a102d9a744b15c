//! Retrieval-head workbench: a toy causal transformer in which retrieval
//! heads are detected by copy-paste scoring, ablated through the attention
//! output projection, and then strengthened with preference optimisation on
//! full-versus-ablated response pairs.

pub mod ablate;
pub mod analysis;
pub mod detect;
pub mod error;
pub mod jsonl;
pub mod model;
pub mod seed;
pub mod synth;
pub mod tasks;
pub mod train;

pub use error::{Error, LastGood, Result};
