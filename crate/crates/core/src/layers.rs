//! Parameterized building blocks shared by the encoder, BEV, fusion and
//! decoder modules.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{Graph, ParamId, ParameterStore, Tag, Tensor, Var};

pub const LN_EPS: f64 = 1e-9;

/// Affine map `y = x W + b`, optionally modulated by scale vectors as
/// `y = (s_w ⊙ W) x + s_b ⊙ b` (scales act per output unit).
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub scale: Option<(ParamId, ParamId)>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        tag: Tag,
    ) -> Result<Self> {
        let std = 1.0 / (in_dim as f64).sqrt();
        Self::with_std(store, rng, name, in_dim, out_dim, bias, tag, std)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_std<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        tag: Tag,
        std: f64,
    ) -> Result<Self> {
        let w = store.add_normal(&format!("{name}.w"), &[in_dim, out_dim], std, tag, rng)?;
        let b = if bias {
            Some(store.add(&format!("{name}.b"), Tensor::zeros(&[out_dim]), tag)?)
        } else {
            None
        };
        Ok(Linear {
            w,
            b,
            scale: None,
            in_dim,
            out_dim,
        })
    }

    /// Adds `s_w`, `s_b` initialized to exactly one.
    pub fn add_scale_vectors(&mut self, store: &mut ParameterStore, name: &str, tag: Tag) -> Result<()> {
        let sw = store.add(&format!("{name}.s_w"), Tensor::full(&[self.out_dim], 1.0), tag)?;
        let sb = store.add(&format!("{name}.s_b"), Tensor::full(&[self.out_dim], 1.0), tag)?;
        self.scale = Some((sw, sb));
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let mut y = g.matmul(x, w)?;
        if let Some((sw, _)) = self.scale {
            let s = g.param(store, sw);
            y = g.mul_row(y, s)?;
        }
        if let Some(b) = self.b {
            let mut bv = g.param(store, b);
            if let Some((_, sb)) = self.scale {
                let s = g.param(store, sb);
                bv = g.mul(bv, s)?;
            }
            y = g.add_row(y, bv)?;
        }
        Ok(y)
    }

    /// Same arithmetic as [`forward`](Self::forward) on plain tensors.
    pub fn apply(&self, store: &ParameterStore, x: &Tensor) -> Result<Tensor> {
        let mut y = x.matmul(store.value(self.w))?;
        let d = self.out_dim;
        if let Some((sw, _)) = self.scale {
            let s = store.value(sw).data();
            for row in y.data_mut().chunks_mut(d) {
                for (v, k) in row.iter_mut().zip(s) {
                    *v *= k;
                }
            }
        }
        if let Some(b) = self.b {
            let bias: Vec<f64> = match self.scale {
                Some((_, sb)) => store
                    .value(b)
                    .data()
                    .iter()
                    .zip(store.value(sb).data())
                    .map(|(x, s)| x * s)
                    .collect(),
                None => store.value(b).data().to_vec(),
            };
            for row in y.data_mut().chunks_mut(d) {
                for (v, k) in row.iter_mut().zip(&bias) {
                    *v += k;
                }
            }
        }
        Ok(y)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.w];
        v.extend(self.b);
        if let Some((a, b)) = self.scale {
            v.push(a);
            v.push(b);
        }
        v
    }
}

/// Layer normalization with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParameterStore, name: &str, dim: usize, tag: Tag) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add(&format!("{name}.g"), Tensor::full(&[dim], 1.0), tag)?,
            bias: store.add(&format!("{name}.b"), Tensor::zeros(&[dim]), tag)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, LN_EPS);
        let gain = g.param(store, self.gain);
        let y = g.mul_row(n, gain)?;
        let bias = g.param(store, self.bias);
        g.add_row(y, bias)
    }

    pub fn apply(&self, store: &ParameterStore, x: &Tensor) -> Tensor {
        let d = x.cols();
        let (gain, bias) = (store.value(self.gain).data(), store.value(self.bias).data());
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * r * gain[j] + bias[j];
            }
        }
        out
    }
}

/// Two-layer GELU perceptron.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        hidden: usize,
        tag: Tag,
    ) -> Result<Self> {
        Ok(FeedForward {
            up: Linear::new(store, rng, &format!("{name}.up"), dim, hidden, true, tag)?,
            down: Linear::new(store, rng, &format!("{name}.down"), hidden, dim, true, tag)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.gelu(h);
        self.down.forward(g, store, h)
    }
}

/// Multi-head attention with separate query and key/value inputs.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        tag: Tag,
    ) -> Result<Self> {
        Ok(MultiHeadAttention {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim, true, tag)?,
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim, true, tag)?,
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim, true, tag)?,
            o: Linear::new(store, rng, &format!("{name}.o"), dim, dim, true, tag)?,
            heads,
        })
    }

    /// `queries` holds `groups` blocks of rows, each attending to the
    /// matching block of `context`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        queries: Var,
        context: Var,
        groups: usize,
        mask: Option<&Tensor>,
    ) -> Result<Var> {
        let q = self.q.forward(g, store, queries)?;
        let k = self.k.forward(g, store, context)?;
        let v = self.v.forward(g, store, context)?;
        let a = g.attention(q, k, v, self.heads, groups, mask)?;
        self.o.forward(g, store, a)
    }
}
