//! Teacher-forced sequences, the text-only warm-up and joint training of
//! the landmark and instruction tasks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{EpisodeExample, Instructor};
use crate::error::{Error, Result};
use crate::lm::{lm_loss, Vocabulary, BOS, END, LANDMARK_MODE, SEP};
use crate::numerics::{par_map, AdamW, Grads, Graph, ParameterStore, Precision, Var};
use crate::simworld::Landmark;

/// Longest landmark draft in tokens.
pub const MAX_DRAFT: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Landmarks,
    Instructions,
}

/// Decoder input, next-token targets and the supervised rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Sequence {
    /// `prefix` is context only; `body` followed by `<end>` is supervised.
    pub fn new(prefix: &[usize], body: &[usize]) -> Self {
        let mut full = prefix.to_vec();
        full.extend_from_slice(body);
        full.push(END);
        let tokens = full[..full.len() - 1].to_vec();
        let targets = full[1..].to_vec();
        let mask = (0..targets.len()).map(|i| i + 1 >= prefix.len()).collect();
        Sequence { tokens, targets, mask }
    }
}

/// Draft ids truncated to whole phrases within [`MAX_DRAFT`] tokens.
pub fn draft_tokens(vocab: &Vocabulary, draft: &[Landmark]) -> Vec<usize> {
    let mut keep = draft.len();
    while keep > 0 && vocab.draft_ids(&draft[..keep]).len() > MAX_DRAFT {
        keep -= 1;
    }
    if keep < draft.len() {
        log::warn!("landmark draft of {} phrases truncated to {keep}", draft.len());
    }
    vocab.draft_ids(&draft[..keep])
}

/// `[<bos>, <lm>]`: the landmark-drafting prefix.
pub fn landmark_prefix() -> Vec<usize> {
    vec![BOS, LANDMARK_MODE]
}

/// `[<bos>, draft, <sep>]`, or just `[<bos>]` for an empty draft.
pub fn instruction_prefix(vocab: &Vocabulary, draft: &[Landmark]) -> Vec<usize> {
    let mut p = vec![BOS];
    let d = draft_tokens(vocab, draft);
    if !d.is_empty() {
        p.extend(d);
        p.push(SEP);
    }
    p
}

pub fn landmark_sequence(vocab: &Vocabulary, landmarks: &[Landmark]) -> Sequence {
    Sequence::new(&landmark_prefix(), &draft_tokens(vocab, landmarks))
}

/// Instruction supervised after an optional landmark draft.
pub fn instruction_sequence(vocab: &Vocabulary, draft: &[Landmark], instruction: &[usize]) -> Sequence {
    Sequence::new(&instruction_prefix(vocab, draft), instruction)
}

pub fn sequence_loss(model: &Instructor, g: &mut Graph, store: &ParameterStore, prompts: Option<Var>, s: &Sequence) -> Result<Var> {
    let logits = model.decoder.forward(g, store, prompts, &s.tokens)?;
    lm_loss(g, logits, &s.targets, &s.mask)
}

/// Loss of one episode under a task. With `refinement` off the
/// instruction task has no draft.
pub fn task_loss(
    model: &Instructor,
    g: &mut Graph,
    store: &ParameterStore,
    ex: &EpisodeExample,
    task: Task,
    refinement: bool,
) -> Result<Var> {
    let prompts = model.prompts(g, store, &ex.visual)?;
    let seq = match task {
        Task::Landmarks => landmark_sequence(&model.vocab, &ex.landmarks),
        Task::Instructions if refinement => instruction_sequence(&model.vocab, &ex.landmarks, &ex.instruction),
        Task::Instructions => instruction_sequence(&model.vocab, &[], &ex.instruction),
    };
    sequence_loss(model, g, store, Some(prompts), &seq)
}

/// Joint objective of one episode: `λ·L_landmarks + L_instructions`.
pub fn joint_loss(model: &Instructor, g: &mut Graph, store: &ParameterStore, ex: &EpisodeExample, landmark_weight: f64) -> Result<Var> {
    let prompts = model.prompts(g, store, &ex.visual)?;
    let ins = instruction_sequence(&model.vocab, &ex.landmarks, &ex.instruction);
    let li = sequence_loss(model, g, store, Some(prompts), &ins)?;
    if landmark_weight == 0.0 {
        return Ok(li);
    }
    let lm = landmark_sequence(&model.vocab, &ex.landmarks);
    let ll = sequence_loss(model, g, store, Some(prompts), &lm)?;
    let ll = g.scale(ll, landmark_weight);
    g.add(ll, li)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub clip: f64,
    /// Train the landmark task and condition instructions on drafts.
    pub refinement: bool,
    /// Probability of sampling the landmark task when refinement is on.
    pub landmark_ratio: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 5000,
            batch: 8,
            lr: 1e-3,
            clip: 1.0,
            refinement: true,
            landmark_ratio: 0.5,
            seed: 0,
        }
    }
}

/// Mean loss of one optimizer step over `batch`.
pub fn training_step(
    model: &Instructor,
    store: &mut ParameterStore,
    batch: &[&EpisodeExample],
    task: Task,
    refinement: bool,
    opt: &AdamW,
    clip: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty training batch".into()));
    }
    let frozen: &ParameterStore = store;
    let parts = par_map(batch, |ex| -> Result<(f64, Grads)> {
        let mut g = Graph::new(Precision::F64);
        let loss = task_loss(model, &mut g, frozen, ex, task, refinement)?;
        let l = g.value(loss).item();
        if !l.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss on episode {}", ex.id)));
        }
        Ok((l, g.backward(loss)?.param_grads()))
    });
    let mut grads = Grads::new();
    let mut total = 0.0;
    for part in parts {
        let (l, gr) = part?;
        total += l;
        grads.merge(&gr);
    }
    grads.scale(1.0 / batch.len() as f64);
    grads.clip_global_norm(clip);
    opt.step(store, &grads)?;
    Ok(total / batch.len() as f64)
}

/// Task sampling with shuffled minibatches. `on_step` receives the
/// iteration, task and loss.
pub fn train(
    model: &Instructor,
    store: &mut ParameterStore,
    data: &[EpisodeExample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, Task, f64),
) -> Result<Vec<f64>> {
    if data.is_empty() || cfg.batch == 0 {
        return Err(Error::Invalid("training needs episodes and a positive batch".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let opt = AdamW {
        lr: cfg.lr,
        ..AdamW::default()
    };
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let task = if cfg.refinement && rng.random_bool(cfg.landmark_ratio) {
            Task::Landmarks
        } else {
            Task::Instructions
        };
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch.min(data.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&data[order[cursor]]);
            cursor += 1;
        }
        let l = training_step(model, store, &batch, task, cfg.refinement, &opt, cfg.clip)?;
        on_step(it, task, l);
        losses.push(l);
    }
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WarmUpConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for WarmUpConfig {
    fn default() -> Self {
        WarmUpConfig {
            epochs: 6,
            batch: 16,
            lr: 2e-3,
            seed: 0,
        }
    }
}

/// Every text format the decoder must know: drafts, plain instructions and
/// draft-conditioned instructions.
pub fn warm_up_corpus(model: &Instructor, data: &[EpisodeExample]) -> Vec<Sequence> {
    let v = &model.vocab;
    let mut out = Vec::with_capacity(data.len() * 3);
    for ex in data {
        out.push(landmark_sequence(v, &ex.landmarks));
        out.push(instruction_sequence(v, &[], &ex.instruction));
        if !ex.landmarks.is_empty() {
            out.push(instruction_sequence(v, &ex.landmarks, &ex.instruction));
        }
    }
    out
}

/// Text-only training of the base decoder, which is frozen afterwards.
/// Returns the mean loss of each epoch.
pub fn warm_up(model: &Instructor, store: &mut ParameterStore, corpus: &[Sequence], cfg: &WarmUpConfig) -> Result<Vec<f64>> {
    if corpus.is_empty() || cfg.batch == 0 {
        return Err(Error::Invalid("warm-up needs text and a positive batch".into()));
    }
    model.warm_up_tags(store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let steps_total = (corpus.len().div_ceil(cfg.batch) * cfg.epochs).max(1);
    let mut step = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let mut grads = Grads::new();
            for &i in chunk {
                let mut g = Graph::new(Precision::F64);
                let loss = sequence_loss(model, &mut g, store, None, &corpus[i])?;
                total += g.value(loss).item();
                grads.merge(&g.backward(loss)?.param_grads());
            }
            grads.scale(1.0 / chunk.len() as f64);
            grads.clip_global_norm(1.0);
            let progress = step as f64 / steps_total as f64;
            let lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            AdamW { lr, ..AdamW::default() }.step(store, &grads)?;
            step += 1;
        }
        history.push(total / corpus.len() as f64);
    }
    model.prompt_tuning_tags(store);
    Ok(history)
}
