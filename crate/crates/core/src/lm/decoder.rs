//! Pre-norm decoder with gated prompt attention and scale vectors.
//!
//! Prompt rows form their own stream: they attend among themselves and
//! never to text. Text rows attend causally among themselves; in the
//! topmost `N_a` layers they also attend to the prompt rows of the same
//! layer with a separate softmax whose output is multiplied per head by
//! `tanh(g)` before joining the text result. With `g = 0` the text path
//! is exactly the prompt-free decoder.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{FeedForward, LayerNorm, Linear};
use crate::numerics::{Graph, ParamId, ParameterStore, Tag, Tensor, Var};

/// Name prefix of the base decoder (frozen after warm-up).
pub const BASE_PREFIX: &str = "lm.base.";
/// Name prefix of the prompt-tuning parameters.
pub const TUNE_PREFIX: &str = "lm.tune.";

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub vocab: usize,
    /// Model width `D_lm`.
    pub dim: usize,
    /// Layer count `M_L`.
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// `N_a`: the topmost layers that see the prompts.
    pub gated_layers: usize,
    /// Text positions, including `<bos>`.
    pub max_len: usize,
    /// Width `D` of the visual tokens.
    pub visual_dim: usize,
    /// `N_p`, equal to the compressor's `N_q`.
    pub n_prompts: usize,
    /// Put scale vectors on every linear layer and the output head instead
    /// of only the gated layers.
    pub scale_all_layers: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            vocab: 29,
            dim: 128,
            layers: 4,
            heads: 4,
            ffn_mult: 4,
            gated_layers: 3,
            max_len: 128,
            visual_dim: 64,
            n_prompts: 10,
            scale_all_layers: false,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("decoder dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if self.layers == 0 || self.gated_layers >= self.layers {
            return Err(Error::Config(format!(
                "gated layers {} must be fewer than layers {}",
                self.gated_layers, self.layers
            )));
        }
        if self.vocab == 0 || self.max_len == 0 || self.n_prompts == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("vocab, max_len, n_prompts and ffn_mult must be positive".into()));
        }
        Ok(())
    }

    pub fn is_gated(&self, layer: usize) -> bool {
        layer >= self.layers - self.gated_layers
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
    /// Per-head gate scalars of gated layers.
    pub gate: Option<ParamId>,
}

impl DecoderLayer {
    fn linears(&self) -> [&Linear; 6] {
        [&self.q, &self.k, &self.v, &self.o, &self.ffn.up, &self.ffn.down]
    }

    fn linears_mut(&mut self) -> [&mut Linear; 6] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o, &mut self.ffn.up, &mut self.ffn.down]
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub tok: ParamId,
    pub pos: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub ln_f: LayerNorm,
    pub head: Linear,
    /// Visual bridge `D → D_lm`.
    pub bridge: Linear,
    /// Prompt bank `E_v`, `[N_p, D]`.
    pub prompt_bank: ParamId,
}

/// Per-layer prompt keys and values, `None` for ungated layers.
#[derive(Clone, Debug)]
pub struct PromptCache {
    pub kv: Vec<Option<(Tensor, Tensor)>>,
}

impl Decoder {
    /// Base parameters are created TUNED so the warm-up can train them;
    /// the prompt-tuning parameters get `tune_tag`.
    pub fn new<R: Rng>(store: &mut ParameterStore, rng: &mut R, cfg: &DecoderConfig, tune_tag: Tag) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let base = Tag::Tuned;
        let tok = store.add_normal("lm.base.tok", &[cfg.vocab, d], 0.5, base, rng)?;
        let pos = store.add_normal("lm.base.pos", &[cfg.max_len, d], 0.1, base, rng)?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let n = format!("lm.base.l{i}");
            let mut layer = DecoderLayer {
                ln1: LayerNorm::new(store, &format!("{n}.ln1"), d, base)?,
                q: Linear::new(store, rng, &format!("{n}.q"), d, d, true, base)?,
                k: Linear::new(store, rng, &format!("{n}.k"), d, d, true, base)?,
                v: Linear::new(store, rng, &format!("{n}.v"), d, d, true, base)?,
                o: Linear::new(store, rng, &format!("{n}.o"), d, d, true, base)?,
                ln2: LayerNorm::new(store, &format!("{n}.ln2"), d, base)?,
                ffn: FeedForward::new(store, rng, &format!("{n}.ffn"), d, d * cfg.ffn_mult, base)?,
                gate: None,
            };
            if cfg.is_gated(i) {
                layer.gate = Some(store.add(&format!("lm.tune.l{i}.gate"), Tensor::zeros(&[cfg.heads]), tune_tag)?);
            }
            if cfg.is_gated(i) || cfg.scale_all_layers {
                for (j, l) in layer.linears_mut().into_iter().enumerate() {
                    l.add_scale_vectors(store, &format!("lm.tune.l{i}.lin{j}"), tune_tag)?;
                }
            }
            layers.push(layer);
        }
        let ln_f = LayerNorm::new(store, "lm.base.ln_f", d, base)?;
        let mut head = Linear::new(store, rng, "lm.base.head", d, cfg.vocab, true, base)?;
        if cfg.scale_all_layers {
            head.add_scale_vectors(store, "lm.tune.head", tune_tag)?;
        }
        let bridge = Linear::new(store, rng, "lm.tune.bridge", cfg.visual_dim, d, true, tune_tag)?;
        let prompt_bank = store.add_normal("lm.tune.prompts", &[cfg.n_prompts, cfg.visual_dim], 0.02, tune_tag, rng)?;
        Ok(Decoder {
            cfg: cfg.clone(),
            tok,
            pos,
            layers,
            ln_f,
            head,
            bridge,
            prompt_bank,
        })
    }

    /// Prompt rows `O′ = bridge(O_t + E_v)` for stacked visual tokens
    /// `[T·N_p, D]`.
    pub fn build_prompts(&self, g: &mut Graph, store: &ParameterStore, visual: Var) -> Result<Var> {
        let s = g.shape(visual).to_vec();
        let np = self.cfg.n_prompts;
        if s.len() != 2 || s[1] != self.cfg.visual_dim || s[0] % np != 0 {
            return Err(Error::Config(format!(
                "visual tokens {s:?} do not tile into {np} prompts of width {}",
                self.cfg.visual_dim
            )));
        }
        let bank = g.param(store, self.prompt_bank);
        let idx: Vec<usize> = (0..s[0]).map(|r| r % np).collect();
        let ev = g.row_gather(bank, &idx)?;
        let x = g.add(visual, ev)?;
        self.bridge.forward(g, store, x)
    }

    /// Runs the prompt stream and returns the keys and values every gated
    /// layer exposes to text.
    pub fn prompt_stream(&self, g: &mut Graph, store: &ParameterStore, prompts: Var) -> Result<Vec<Option<(Var, Var)>>> {
        let s = g.shape(prompts).to_vec();
        if s.len() != 2 || s[1] != self.cfg.dim {
            return Err(Error::shape("prompt stream", &s, &[0, self.cfg.dim]));
        }
        let last_gated = self.cfg.layers - 1;
        let mut p = prompts;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let pn = layer.ln1.forward(g, store, p)?;
            let k = layer.k.forward(g, store, pn)?;
            let v = layer.v.forward(g, store, pn)?;
            out.push(layer.gate.map(|_| (k, v)));
            if i == last_gated {
                break;
            }
            let q = layer.q.forward(g, store, pn)?;
            let a = g.attention(q, k, v, self.cfg.heads, 1, None)?;
            let a = layer.o.forward(g, store, a)?;
            p = g.add(p, a)?;
            let h = layer.ln2.forward(g, store, p)?;
            let f = layer.ffn.forward(g, store, h)?;
            p = g.add(p, f)?;
        }
        Ok(out)
    }

    /// Logits `[L, V]` for text `tokens` (starting with `<bos>`), optionally
    /// conditioned on prompt rows `[P, D_lm]`.
    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, prompts: Option<Var>, tokens: &[usize]) -> Result<Var> {
        let l = tokens.len();
        if l == 0 || l > self.cfg.max_len {
            return Err(Error::Range(format!("text length {l} outside 1..={}", self.cfg.max_len)));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab) {
            return Err(Error::Range(format!("token {bad} with vocabulary {}", self.cfg.vocab)));
        }
        let prompt_kv = match prompts {
            Some(p) if g.shape(p)[0] > 0 => Some(self.prompt_stream(g, store, p)?),
            _ => None,
        };
        let tok = g.param(store, self.tok);
        let x = g.row_gather(tok, tokens)?;
        let pos = g.param(store, self.pos);
        let pidx: Vec<usize> = (0..l).collect();
        let pe = g.row_gather(pos, &pidx)?;
        let mut x = g.add(x, pe)?;
        let mask = causal_mask(l);
        let dh = self.cfg.dim / self.cfg.heads;
        for (i, layer) in self.layers.iter().enumerate() {
            let xn = layer.ln1.forward(g, store, x)?;
            let q = layer.q.forward(g, store, xn)?;
            let k = layer.k.forward(g, store, xn)?;
            let v = layer.v.forward(g, store, xn)?;
            let mut a = g.attention(q, k, v, self.cfg.heads, 1, Some(&mask))?;
            if let (Some(gate), Some(Some((kp, vp)))) = (layer.gate, prompt_kv.as_ref().map(|kv| kv[i])) {
                let b = g.attention(q, kp, vp, self.cfg.heads, 1, None)?;
                let gv = g.param(store, gate);
                let gt = g.tanh(gv);
                let idx: Vec<Option<usize>> = (0..self.cfg.dim).map(|c| Some(c / dh)).collect();
                let row = g.gather(gt, Rc::new(idx), &[self.cfg.dim])?;
                let b = g.mul_row(b, row)?;
                a = g.add(a, b)?;
            }
            let a = layer.o.forward(g, store, a)?;
            x = g.add(x, a)?;
            let h = layer.ln2.forward(g, store, x)?;
            let f = layer.ffn.forward(g, store, h)?;
            x = g.add(x, f)?;
        }
        let x = self.ln_f.forward(g, store, x)?;
        self.head.forward(g, store, x)
    }

    /// Prompt keys and values as plain tensors for incremental decoding.
    pub fn prompt_cache(&self, store: &ParameterStore, prompts: &Tensor) -> Result<PromptCache> {
        if prompts.rows() == 0 {
            return Ok(PromptCache {
                kv: vec![None; self.layers.len()],
            });
        }
        let mut g = Graph::new(crate::numerics::Precision::F64);
        let p = g.constant(prompts.clone());
        let kv = self.prompt_stream(&mut g, store, p)?;
        let mut out: Vec<Option<(Tensor, Tensor)>> = kv
            .into_iter()
            .map(|e| e.map(|(k, v)| (g.value(k).clone(), g.value(v).clone())))
            .collect();
        out.resize(self.layers.len(), None);
        Ok(PromptCache { kv: out })
    }

    /// Incremental decoding state over `cache`.
    pub fn start<'a>(&'a self, store: &'a ParameterStore, cache: &'a PromptCache) -> DecodeState<'a> {
        DecodeState {
            dec: self,
            store,
            cache,
            keys: vec![Vec::new(); self.layers.len()],
            values: vec![Vec::new(); self.layers.len()],
            len: 0,
        }
    }

    pub fn base_params(&self) -> Vec<ParamId> {
        let mut v = vec![self.tok, self.pos];
        for layer in &self.layers {
            v.extend([layer.ln1.gain, layer.ln1.bias, layer.ln2.gain, layer.ln2.bias]);
            for l in layer.linears() {
                v.push(l.w);
                v.extend(l.b);
            }
        }
        v.extend([self.ln_f.gain, self.ln_f.bias, self.head.w]);
        v.extend(self.head.b);
        v
    }

    pub fn tune_params(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        for layer in &self.layers {
            v.extend(layer.gate);
            for l in layer.linears() {
                if let Some((a, b)) = l.scale {
                    v.extend([a, b]);
                }
            }
        }
        if let Some((a, b)) = self.head.scale {
            v.extend([a, b]);
        }
        v.extend(self.bridge.params());
        v.push(self.prompt_bank);
        v
    }
}

/// Additive mask hiding future positions.
pub fn causal_mask(l: usize) -> Tensor {
    let mut m = Tensor::zeros(&[l, l]);
    for i in 0..l {
        for j in i + 1..l {
            m.data_mut()[i * l + j] = f64::NEG_INFINITY;
        }
    }
    m
}

/// Key/value cache of the text positions decoded so far.
pub struct DecodeState<'a> {
    dec: &'a Decoder,
    store: &'a ParameterStore,
    cache: &'a PromptCache,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl DecodeState<'_> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Feeds one token and returns the next-token logits.
    pub fn push(&mut self, token: usize) -> Result<Vec<f64>> {
        let cfg = &self.dec.cfg;
        if self.len >= cfg.max_len {
            return Err(Error::Range(format!("text length exceeds {}", cfg.max_len)));
        }
        if token >= cfg.vocab {
            return Err(Error::Range(format!("token {token} with vocabulary {}", cfg.vocab)));
        }
        let store = self.store;
        let d = cfg.dim;
        let (heads, dh) = (cfg.heads, cfg.dim / cfg.heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x: Vec<f64> = store
            .value(self.dec.tok)
            .row(token)
            .iter()
            .zip(store.value(self.dec.pos).row(self.len))
            .map(|(a, b)| a + b)
            .collect();
        let n = self.len + 1;
        for (i, layer) in self.dec.layers.iter().enumerate() {
            let xn = layer.ln1.apply(store, &row_tensor(&x));
            let q = layer.q.apply(store, &xn)?.into_data();
            self.keys[i].extend(layer.k.apply(store, &xn)?.into_data());
            self.values[i].extend(layer.v.apply(store, &xn)?.into_data());
            let mut a = attend(&q, &self.keys[i], &self.values[i], n, d, heads, scale);
            if let (Some(gate), Some((kp, vp))) = (layer.gate, &self.cache.kv[i]) {
                let b = attend(&q, kp.data(), vp.data(), kp.rows(), d, heads, scale);
                let gv = store.value(gate).data();
                for (c, (av, bv)) in a.iter_mut().zip(&b).enumerate() {
                    *av += bv * gv[c / dh].tanh();
                }
            }
            let a = layer.o.apply(store, &row_tensor(&a))?;
            for (xv, av) in x.iter_mut().zip(a.data()) {
                *xv += av;
            }
            let h = layer.ln2.apply(store, &row_tensor(&x));
            let mut u = layer.ffn.up.apply(store, &h)?;
            for v in u.data_mut() {
                *v = crate::numerics::graph::gelu(*v);
            }
            let f = layer.ffn.down.apply(store, &u)?;
            for (xv, fv) in x.iter_mut().zip(f.data()) {
                *xv += fv;
            }
        }
        self.len = n;
        let xn = self.dec.ln_f.apply(store, &row_tensor(&x));
        Ok(self.dec.head.apply(store, &xn)?.into_data())
    }
}

fn row_tensor(x: &[f64]) -> Tensor {
    Tensor::new(vec![1, x.len()], x.to_vec()).expect("row shape")
}

/// Multi-head attention of one query row over `n` key/value rows.
fn attend(q: &[f64], keys: &[f64], values: &[f64], n: usize, d: usize, heads: usize, scale: f64) -> Vec<f64> {
    let dh = d / heads;
    let mut out = vec![0.0; d];
    let mut s = vec![0.0; n];
    for h in 0..heads {
        let qh = &q[h * dh..(h + 1) * dh];
        for (j, sj) in s.iter_mut().enumerate() {
            let kj = &keys[j * d + h * dh..j * d + (h + 1) * dh];
            *sj = qh.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        crate::numerics::graph::softmax_in_place(&mut s);
        let oh = &mut out[h * dh..(h + 1) * dh];
        for (j, &p) in s.iter().enumerate() {
            for (o, v) in oh.iter_mut().zip(&values[j * d + h * dh..j * d + (h + 1) * dh]) {
                *o += p * v;
            }
        }
    }
    out
}
