//! Desk-scale auto-regressive dialogue generation: a dense tensor engine with
//! reverse-mode gradients, character/BPE tokenizers, a decoder-only
//! transformer, weighted joint-loss training with Adam + Noam decay,
//! greedy/beam/top-k/top-p decoding with likelihood-ranked batch generation,
//! BLEU/Distinct evaluation, and bot-to-bot interaction.

pub mod autograd;
pub mod chat;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
