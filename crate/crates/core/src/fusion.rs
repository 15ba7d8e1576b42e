//! Perspective-BEV fusion and the query compressor.
//!
//! The fusion stack lets every BEV token of a step attend to that step's
//! perspective and action tokens; the compressor reduces the fused grid to
//! `N_q` tokens per step with a bank of learned queries. Steps are batched
//! as attention groups, so one pass handles a whole episode.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::numerics::{Graph, ParamId, ParameterStore, Tag, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    /// Token width `D`.
    pub dim: usize,
    /// Width of incoming BEV features; a bridge is added when it differs.
    pub bev_dim: usize,
    pub fusion_blocks: usize,
    pub compressor_blocks: usize,
    pub heads: usize,
    pub n_q: usize,
    pub ffn_mult: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            dim: 64,
            bev_dim: 64,
            fusion_blocks: 2,
            compressor_blocks: 2,
            heads: 4,
            n_q: 10,
            ffn_mult: 1,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if self.n_q == 0 || self.ffn_mult == 0 || self.bev_dim == 0 {
            return Err(Error::Config("n_q, ffn_mult and bev_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Which visual sources reach the compressor and how they are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VisualMode {
    /// Perspective and action tokens only.
    Perspective,
    /// BEV tokens only.
    Bev,
    /// Perspective, action and BEV tokens side by side.
    Concat,
    /// BEV tokens after attending to perspective and action tokens.
    Fusion,
}

impl VisualMode {
    pub fn uses_bev(self) -> bool {
        self != VisualMode::Perspective
    }

    pub fn uses_perspective(self) -> bool {
        self != VisualMode::Bev
    }

    pub fn name(self) -> &'static str {
        match self {
            VisualMode::Perspective => "perspective",
            VisualMode::Bev => "bev",
            VisualMode::Concat => "concat",
            VisualMode::Fusion => "fusion",
        }
    }
}

impl std::str::FromStr for VisualMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "perspective" => VisualMode::Perspective,
            "bev" => VisualMode::Bev,
            "concat" => VisualMode::Concat,
            "fusion" => VisualMode::Fusion,
            _ => return Err(Error::Config(format!("unknown visual mode '{s}'"))),
        })
    }
}

/// Post-norm block: BEV self-attention, cross-attention to the context
/// tokens, feed-forward.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub self_attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
    pub ln3: LayerNorm,
}

impl FusionBlock {
    fn new<R: Rng>(store: &mut ParameterStore, rng: &mut R, name: &str, cfg: &FusionConfig, tag: Tag) -> Result<Self> {
        let d = cfg.dim;
        Ok(FusionBlock {
            self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.self"), d, cfg.heads, tag)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d, tag)?,
            cross_attn: MultiHeadAttention::new(store, rng, &format!("{name}.cross"), d, cfg.heads, tag)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d, tag)?,
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, d * cfg.ffn_mult, tag)?,
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), d, tag)?,
        })
    }

    /// `x` is `[T·Q, D]`, `context` is `[T·C, D]`.
    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var, context: Var, steps: usize) -> Result<Var> {
        let a = self.self_attn.forward(g, store, x, x, steps, None)?;
        let h = g.add(x, a)?;
        let h = self.ln1.forward(g, store, h)?;
        let c = self.cross_attn.forward(g, store, h, context, steps, None)?;
        let h2 = g.add(h, c)?;
        let h2 = self.ln2.forward(g, store, h2)?;
        let f = self.ffn.forward(g, store, h2)?;
        let h3 = g.add(h2, f)?;
        self.ln3.forward(g, store, h3)
    }

    fn params(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        for m in [&self.self_attn, &self.cross_attn] {
            for l in [&m.q, &m.k, &m.v, &m.o] {
                v.extend(l.params());
            }
        }
        for ln in [&self.ln1, &self.ln2, &self.ln3] {
            v.extend([ln.gain, ln.bias]);
        }
        v.extend(self.ffn.up.params());
        v.extend(self.ffn.down.params());
        v
    }
}

/// Post-norm block: queries cross-attend to the tokens, then feed-forward.
#[derive(Clone, Debug)]
pub struct CompressorBlock {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ffn: FeedForward,
    pub ln2: LayerNorm,
}

impl CompressorBlock {
    fn new<R: Rng>(store: &mut ParameterStore, rng: &mut R, name: &str, cfg: &FusionConfig, tag: Tag) -> Result<Self> {
        let d = cfg.dim;
        Ok(CompressorBlock {
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d, cfg.heads, tag)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d, tag)?,
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, d * cfg.ffn_mult, tag)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d, tag)?,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParameterStore, q: Var, tokens: Var, steps: usize) -> Result<Var> {
        let a = self.attn.forward(g, store, q, tokens, steps, None)?;
        let h = g.add(q, a)?;
        let h = self.ln1.forward(g, store, h)?;
        let f = self.ffn.forward(g, store, h)?;
        let h2 = g.add(h, f)?;
        self.ln2.forward(g, store, h2)
    }

    fn params(&self) -> Vec<ParamId> {
        let m = &self.attn;
        let mut v = Vec::new();
        for l in [&m.q, &m.k, &m.v, &m.o] {
            v.extend(l.params());
        }
        v.extend([self.ln1.gain, self.ln1.bias, self.ln2.gain, self.ln2.bias]);
        v.extend(self.ffn.up.params());
        v.extend(self.ffn.down.params());
        v
    }
}

/// Fusion blocks, the optional BEV bridge and the query bank.
#[derive(Clone, Debug)]
pub struct FusionStack {
    pub cfg: FusionConfig,
    pub bridge: Option<Linear>,
    pub blocks: Vec<FusionBlock>,
    pub queries: ParamId,
    pub compressor: Vec<CompressorBlock>,
}

impl FusionStack {
    pub fn new<R: Rng>(store: &mut ParameterStore, rng: &mut R, cfg: &FusionConfig, tag: Tag) -> Result<Self> {
        cfg.validate()?;
        let bridge = if cfg.bev_dim != cfg.dim {
            Some(Linear::new(store, rng, "fusion.bridge", cfg.bev_dim, cfg.dim, true, tag)?)
        } else {
            None
        };
        let blocks = (0..cfg.fusion_blocks)
            .map(|b| FusionBlock::new(store, rng, &format!("fusion.block{b}"), cfg, tag))
            .collect::<Result<Vec<_>>>()?;
        let queries = store.add_normal("fusion.queries", &[cfg.n_q, cfg.dim], 1.0, tag, rng)?;
        let compressor = (0..cfg.compressor_blocks)
            .map(|b| CompressorBlock::new(store, rng, &format!("fusion.comp{b}"), cfg, tag))
            .collect::<Result<Vec<_>>>()?;
        Ok(FusionStack {
            cfg: cfg.clone(),
            bridge,
            blocks,
            queries,
            compressor,
        })
    }

    /// Brings `[T·Q, D_b]` BEV features to width `D`.
    pub fn bridge_bev(&self, g: &mut Graph, store: &ParameterStore, bev: Var) -> Result<Var> {
        let w = g.shape(bev)[1];
        if w != self.cfg.bev_dim {
            return Err(Error::shape("bev features", &[w], &[self.cfg.bev_dim]));
        }
        match &self.bridge {
            Some(l) => l.forward(g, store, bev),
            None => Ok(bev),
        }
    }

    /// Fused BEV tokens `[T·Q, D]` from BEV features `[T·Q, D_b]` and
    /// step-major context tokens `[T·C, D]`.
    pub fn fuse(&self, g: &mut Graph, store: &ParameterStore, bev: Var, context: Var, steps: usize) -> Result<Var> {
        let (bs, cs) = (g.shape(bev).to_vec(), g.shape(context).to_vec());
        if steps == 0 || bs[0] % steps != 0 || cs[0] % steps != 0 || cs[1] != self.cfg.dim {
            return Err(Error::shape("fuse", &bs, &cs));
        }
        let mut x = self.bridge_bev(g, store, bev)?;
        for b in &self.blocks {
            x = b.forward(g, store, x, context, steps)?;
        }
        Ok(x)
    }

    /// `[T·N_q, D]`: the query bank attends to each step's `[T·M, D]` tokens.
    pub fn compress(&self, g: &mut Graph, store: &ParameterStore, tokens: Var, steps: usize) -> Result<Var> {
        let s = g.shape(tokens).to_vec();
        if steps == 0 || s[0] % steps != 0 || s[1] != self.cfg.dim {
            return Err(Error::shape("compress", &s, &[steps, self.cfg.dim]));
        }
        let bank = g.param(store, self.queries);
        let idx: Vec<usize> = (0..steps).flat_map(|_| 0..self.cfg.n_q).collect();
        let mut q = g.row_gather(bank, &idx)?;
        for b in &self.compressor {
            q = b.forward(g, store, q, tokens, steps)?;
        }
        Ok(q)
    }

    /// Visual tokens `[T·N_q, D]` of an episode under `mode`.
    ///
    /// `persp` is `[T·K, D]` step-major, `action` is `[T, D]` and `bev`
    /// is `[T·Q, D_b]` (required unless the mode ignores BEV).
    #[allow(clippy::too_many_arguments)]
    pub fn visual_tokens(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        mode: VisualMode,
        persp: Var,
        action: Var,
        bev: Option<Var>,
        steps: usize,
    ) -> Result<Var> {
        let context = step_context(g, persp, action, steps)?;
        let bev = match (mode.uses_bev(), bev) {
            (true, Some(b)) => Some(b),
            (true, None) => return Err(Error::Invalid(format!("{} mode needs BEV features", mode.name()))),
            (false, _) => None,
        };
        let tokens = match mode {
            VisualMode::Perspective => context,
            VisualMode::Bev => self.bridge_bev(g, store, bev.unwrap())?,
            VisualMode::Concat => {
                let b = self.bridge_bev(g, store, bev.unwrap())?;
                interleave_steps(g, &[context, b], steps)?
            }
            VisualMode::Fusion => self.fuse(g, store, bev.unwrap(), context, steps)?,
        };
        self.compress(g, store, tokens, steps)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        if let Some(b) = &self.bridge {
            v.extend(b.params());
        }
        for b in &self.blocks {
            v.extend(b.params());
        }
        v.push(self.queries);
        for b in &self.compressor {
            v.extend(b.params());
        }
        v
    }
}

/// `[P_t, a_t]` per step, step-major: `[T·(K+1), D]`.
pub fn step_context(g: &mut Graph, persp: Var, action: Var, steps: usize) -> Result<Var> {
    interleave_steps(g, &[persp, action], steps)
}

/// Concatenates per-step row blocks of several step-major matrices.
pub fn interleave_steps(g: &mut Graph, parts: &[Var], steps: usize) -> Result<Var> {
    let mut sizes = Vec::with_capacity(parts.len());
    for &p in parts {
        let r = g.shape(p)[0];
        if steps == 0 || r % steps != 0 {
            return Err(Error::shape("interleave_steps", g.shape(p), &[steps]));
        }
        sizes.push(r / steps);
    }
    let all = g.concat_rows(parts)?;
    let mut offsets = Vec::with_capacity(parts.len());
    let mut acc = 0;
    for &s in &sizes {
        offsets.push(acc);
        acc += s * steps;
    }
    let mut idx = Vec::with_capacity(acc);
    for t in 0..steps {
        for (&s, &o) in sizes.iter().zip(&offsets) {
            idx.extend(o + t * s..o + (t + 1) * s);
        }
    }
    g.row_gather(all, &idx)
}
