//! Small decoder-only language model prompted by visual tokens.

pub mod decoder;
pub mod generate;
pub mod vocab;

pub use decoder::{causal_mask, DecodeState, Decoder, DecoderConfig, PromptCache};
pub use generate::{argmax, generate, Decoding, GenerateOptions};
pub use vocab::{Vocabulary, BOS, END, LANDMARK_MODE, PAD, SEP};

use crate::error::Result;
use crate::numerics::{Graph, ParameterStore, Var};

/// Mean negative log-likelihood of `targets` over masked rows of `logits`.
/// An empty mask is an error.
pub fn lm_loss(g: &mut Graph, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    g.cross_entropy(logits, targets, mask)
}

/// Share of scalars in the TUNED partition.
pub fn tuned_parameter_fraction(store: &ParameterStore) -> f64 {
    store.tuned_fraction()
}
