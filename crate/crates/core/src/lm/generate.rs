//! Autoregressive decoding with the key/value cache.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::distr::{weighted::WeightedIndex, Distribution};

use super::decoder::Decoder;
use super::vocab::{BOS, END, LANDMARK_MODE, PAD};
use crate::error::{Error, Result};
use crate::numerics::{ParameterStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decoding {
    Greedy,
    Temperature { tau: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateOptions {
    pub decoding: Decoding,
    /// Maximum number of generated tokens.
    pub max_new: usize,
    /// Restricts sampling to these ids when set.
    pub allowed: Option<Vec<usize>>,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            decoding: Decoding::Greedy,
            max_new: 128,
            allowed: None,
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Continues `prefix` (which starts with `<bos>`) until `<end>`, `max_new`
/// tokens or the position limit. Returns the generated ids, including the
/// final `<end>` when one was produced.
pub fn generate(
    dec: &Decoder,
    store: &ParameterStore,
    prompts: &Tensor,
    prefix: &[usize],
    opts: &GenerateOptions,
) -> Result<Vec<usize>> {
    if prefix.first() != Some(&BOS) {
        return Err(Error::Generation("prefix must start with <bos>".into()));
    }
    if prefix.len() >= dec.cfg.max_len {
        return Err(Error::Generation(format!(
            "prefix of {} tokens leaves no room under {}",
            prefix.len(),
            dec.cfg.max_len
        )));
    }
    let cache = dec.prompt_cache(store, prompts)?;
    let mut state = dec.start(store, &cache);
    let mut logits = Vec::new();
    for &t in prefix {
        logits = state.push(t)?;
    }
    let mut blocked = vec![false; dec.cfg.vocab];
    for t in [PAD, BOS, LANDMARK_MODE] {
        if t < blocked.len() {
            blocked[t] = true;
        }
    }
    if let Some(allowed) = &opts.allowed {
        blocked.iter_mut().for_each(|b| *b = true);
        for &a in allowed {
            if a < blocked.len() {
                blocked[a] = false;
            }
        }
    }
    let mut rng = match opts.decoding {
        Decoding::Temperature { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Decoding::Greedy => None,
    };
    let mut out = Vec::new();
    while out.len() < opts.max_new {
        for (l, &b) in logits.iter_mut().zip(&blocked) {
            if b {
                *l = f64::NEG_INFINITY;
            }
        }
        let next = match (opts.decoding, rng.as_mut()) {
            (Decoding::Temperature { tau, .. }, Some(rng)) if tau > 0.0 => {
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = logits.iter().map(|l| ((l - max) / tau).exp()).collect();
                WeightedIndex::new(&w)
                    .map_err(|e| Error::Generation(e.to_string()))?
                    .sample(rng)
            }
            _ => argmax(&logits),
        };
        out.push(next);
        if next == END || state.len() >= dec.cfg.max_len {
            break;
        }
        logits = state.push(next)?;
    }
    Ok(out)
}
