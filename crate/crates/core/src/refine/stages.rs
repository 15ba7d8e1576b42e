//! Landmark drafting, draft-conditioned generation and multi-turn
//! refinement.

use serde::{Deserialize, Serialize};

use super::model::Instructor;
use super::train::{instruction_prefix, landmark_prefix, MAX_DRAFT};
use crate::error::Result;
use crate::lm::{generate, GenerateOptions, END};
use crate::numerics::{ParameterStore, Tensor};
use crate::simworld::grammar::landmarks_of;
use crate::simworld::Landmark;

/// One refinement turn as written to trace files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub turn: usize,
    pub draft: Vec<String>,
    pub instruction: Vec<String>,
}

/// Deduplicated in first-seen order.
pub fn merge_drafts(first: &[Landmark], second: &[Landmark]) -> Vec<Landmark> {
    let mut out: Vec<Landmark> = Vec::new();
    for l in first.iter().chain(second) {
        if !out.contains(l) {
            out.push(*l);
        }
    }
    out
}

fn strip_end(mut ids: Vec<usize>) -> Vec<usize> {
    if ids.last() == Some(&END) {
        ids.pop();
    }
    ids
}

impl Instructor {
    /// Stage one: a landmark draft decoded under the landmark-mode prefix
    /// with every non-landmark token masked out.
    pub fn generate_landmarks(&self, store: &ParameterStore, prompts: &Tensor) -> Result<Vec<Landmark>> {
        let opts = GenerateOptions {
            max_new: MAX_DRAFT,
            allowed: Some(self.vocab.landmark_ids()),
            ..GenerateOptions::default()
        };
        let ids = generate(&self.decoder, store, prompts, &landmark_prefix(), &opts)?;
        Ok(merge_drafts(&self.vocab.parse_draft(&ids), &[]))
    }

    /// Stage two: the instruction given a draft. An empty draft is plain
    /// single-stage generation. Returns word ids without `<end>`.
    pub fn refine_instruction(&self, store: &ParameterStore, prompts: &Tensor, draft: &[Landmark]) -> Result<Vec<usize>> {
        let prefix = instruction_prefix(&self.vocab, draft);
        let opts = GenerateOptions {
            max_new: self.decoder.cfg.max_len - prefix.len(),
            ..GenerateOptions::default()
        };
        Ok(strip_end(generate(&self.decoder, store, prompts, &prefix, &opts)?))
    }

    /// Single-stage generation.
    pub fn generate_direct(&self, store: &ParameterStore, prompts: &Tensor) -> Result<Vec<usize>> {
        self.refine_instruction(store, prompts, &[])
    }

    /// `steps = 0` is direct generation. Turn 1 refines the stage-one
    /// draft; turn `r ≥ 2` refines the draft merged with the landmarks the
    /// parser finds in turn `r − 1`. Returns every turn; the last one is
    /// the answer.
    pub fn iterative_refine(&self, store: &ParameterStore, prompts: &Tensor, steps: usize) -> Result<Vec<Turn>> {
        let words = |ids: &[usize]| self.vocab.decode(ids);
        if steps == 0 {
            let ins = self.generate_direct(store, prompts)?;
            return Ok(vec![Turn {
                turn: 0,
                draft: Vec::new(),
                instruction: words(&ins),
            }]);
        }
        let generated = self.generate_landmarks(store, prompts)?;
        let mut turns: Vec<Turn> = Vec::with_capacity(steps);
        for r in 1..=steps {
            let draft = match turns.last() {
                Some(prev) => merge_drafts(&generated, &landmarks_of(&prev.instruction)),
                None => generated.clone(),
            };
            let ins = self.refine_instruction(store, prompts, &draft)?;
            turns.push(Turn {
                turn: r,
                draft: draft.iter().map(Landmark::phrase).collect(),
                instruction: words(&ins),
            });
        }
        Ok(turns)
    }
}
