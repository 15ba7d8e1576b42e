//! The assembled instruction generator: view encoder, fusion stack and
//! prompted decoder.

use rand::Rng;

use crate::encoder::{EmbeddingTables, EpisodeInputs};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionStack, VisualMode};
use crate::lm::decoder::{BASE_PREFIX, TUNE_PREFIX};
use crate::lm::{Decoder, DecoderConfig, Vocabulary};
use crate::numerics::{Graph, ParameterStore, Precision, Tag, Tensor, Var};
use crate::simworld::{EpisodeRecord, Landmark};

#[derive(Clone, Debug, PartialEq)]
pub struct InstructorConfig {
    /// View feature channels `D_p`.
    pub feat_dim: usize,
    /// Number of step embeddings.
    pub t_max: usize,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
    pub mode: VisualMode,
}

/// Visual inputs of one episode that do not change during training.
#[derive(Clone, Debug)]
pub struct EpisodeVisual {
    pub inputs: EpisodeInputs,
    /// Frozen BEV features `[T·H_b·W_b, D_b]`, step-major.
    pub bev: Option<Tensor>,
}

/// One episode prepared for training and evaluation.
#[derive(Clone, Debug)]
pub struct EpisodeExample {
    pub id: usize,
    pub visual: EpisodeVisual,
    /// Reference instruction ids (words only).
    pub instruction: Vec<usize>,
    pub landmarks: Vec<Landmark>,
}

impl EpisodeExample {
    pub fn new(ep: &EpisodeRecord, vocab: &Vocabulary, bev: Option<Tensor>) -> Result<Self> {
        Ok(EpisodeExample {
            id: ep.id,
            visual: EpisodeVisual {
                inputs: EpisodeInputs::from_record(ep)?,
                bev,
            },
            instruction: vocab.encode(&ep.instruction)?,
            landmarks: ep.landmarks.clone(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Instructor {
    pub cfg: InstructorConfig,
    pub vocab: Vocabulary,
    pub tables: EmbeddingTables,
    pub fusion: FusionStack,
    pub decoder: Decoder,
}

impl Instructor {
    /// Creates every module; parts the visual mode does not use are frozen
    /// so that they neither train nor count as tuned.
    pub fn new<R: Rng>(store: &mut ParameterStore, rng: &mut R, cfg: &InstructorConfig) -> Result<Self> {
        let vocab = Vocabulary::new();
        if cfg.decoder.vocab != vocab.len() {
            return Err(Error::Config(format!(
                "decoder vocabulary {} differs from the grammar's {}",
                cfg.decoder.vocab,
                vocab.len()
            )));
        }
        if cfg.decoder.n_prompts != cfg.fusion.n_q {
            return Err(Error::Config(format!(
                "prompt count {} must equal the compressor's {} queries",
                cfg.decoder.n_prompts, cfg.fusion.n_q
            )));
        }
        if cfg.decoder.visual_dim != cfg.fusion.dim {
            return Err(Error::Config("decoder visual width must equal the fusion width".into()));
        }
        let tables = EmbeddingTables::new(store, rng, cfg.feat_dim, cfg.fusion.dim, cfg.t_max, Tag::Tuned)?;
        let fusion = FusionStack::new(store, rng, &cfg.fusion, Tag::Tuned)?;
        let decoder = Decoder::new(store, rng, &cfg.decoder, Tag::Tuned)?;
        let model = Instructor {
            cfg: cfg.clone(),
            vocab,
            tables,
            fusion,
            decoder,
        };
        model.apply_mode_tags(store);
        Ok(model)
    }

    fn apply_mode_tags(&self, store: &mut ParameterStore) {
        let mode = self.cfg.mode;
        if mode != VisualMode::Fusion {
            store.set_tag_prefix("fusion.block", Tag::Frozen);
        }
        if !mode.uses_perspective() {
            store.set_tag_prefix("enc.", Tag::Frozen);
        }
        if !mode.uses_bev() {
            store.set_tag_prefix("fusion.bridge", Tag::Frozen);
        }
    }

    /// Freezes the base decoder; called after the text-only warm-up.
    pub fn freeze_base(&self, store: &mut ParameterStore) {
        store.set_tag_prefix(BASE_PREFIX, Tag::Frozen);
    }

    /// Tags for the text-only warm-up: only the base decoder trains.
    pub fn warm_up_tags(&self, store: &mut ParameterStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let tag = if store.param(id).name().starts_with(BASE_PREFIX) {
                Tag::Tuned
            } else {
                Tag::Frozen
            };
            store.set_tag(id, tag);
        }
    }

    /// Tags for prompt tuning: base frozen, everything the mode uses tuned.
    pub fn prompt_tuning_tags(&self, store: &mut ParameterStore) {
        for prefix in ["enc.", "fusion.", TUNE_PREFIX] {
            store.set_tag_prefix(prefix, Tag::Tuned);
        }
        self.freeze_base(store);
        self.apply_mode_tags(store);
    }

    /// Prompt rows `O′` `[T·N_p, D_lm]` of an episode.
    pub fn prompts(&self, g: &mut Graph, store: &ParameterStore, v: &EpisodeVisual) -> Result<Var> {
        let (p, a) = self.tables.episode(g, store, &v.inputs)?;
        let bev = match (&v.bev, self.cfg.mode.uses_bev()) {
            (Some(b), true) => Some(g.constant(b.clone())),
            _ => None,
        };
        let o = self.fusion.visual_tokens(g, store, self.cfg.mode, p, a, bev, v.inputs.steps)?;
        self.decoder.build_prompts(g, store, o)
    }

    pub fn prompt_tensor(&self, store: &ParameterStore, v: &EpisodeVisual) -> Result<Tensor> {
        let mut g = Graph::new(Precision::F64);
        let p = self.prompts(&mut g, store, v)?;
        Ok(g.value(p).clone())
    }
}
