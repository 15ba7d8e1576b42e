//! Depth bins, the per-pixel depth-prediction head and the
//! depth-consistency weight.

use std::rc::Rc;

use rand::Rng;

use super::BevConfig;
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::numerics::{Graph, ParamId, ParameterStore, Tag, Var};

/// Uniformly spaced bin centers.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthBins {
    pub centers: Vec<f64>,
}

impl DepthBins {
    pub fn new(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n < 2 || !(lo < hi) {
            return Err(Error::Config(format!("depth bins need n >= 2 and lo < hi, got {n}, [{lo}, {hi}]")));
        }
        let step = (hi - lo) / (n - 1) as f64;
        Ok(DepthBins {
            centers: (0..n).map(|i| lo + step * i as f64).collect(),
        })
    }

    pub fn from_config(cfg: &BevConfig) -> Result<Self> {
        Self::new(cfg.depth_range.0, cfg.depth_range.1, cfg.n_d)
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

/// Linear interpolation between the two nearest bin centers, clamped to
/// the outer centers.
pub fn depth_to_distribution(d: f64, bins: &DepthBins) -> Vec<f64> {
    let c = &bins.centers;
    let n = c.len();
    let mut out = vec![0.0; n];
    if d.is_nan() || d <= c[0] {
        out[0] = 1.0;
        return out;
    }
    if d >= c[n - 1] {
        out[n - 1] = 1.0;
        return out;
    }
    let i = c.partition_point(|&x| x <= d) - 1;
    let w = (d - c[i]) / (c[i + 1] - c[i]);
    out[i] = 1.0 - w;
    out[i + 1] += w;
    out
}

/// Cosine similarity of two nonnegative vectors.
pub fn depth_consistency_weight(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape("depth_consistency_weight", &[pred.len()], &[target.len()]));
    }
    let na = pred.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = target.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("depth consistency of a zero-norm vector".into()));
    }
    let dot: f64 = pred.iter().zip(target).map(|(a, b)| a * b).sum();
    Ok((dot / (na * nb)).clamp(0.0, 1.0))
}

/// Gather indices turning an `h × w` map into 3×3 zero-padded patches,
/// `[h·w, c·9]`. With `channel_major` the source is `[c, h·w]`, otherwise
/// `[h·w, c]`.
pub fn im2col_index(h: usize, w: usize, c: usize, channel_major: bool) -> Vec<Option<usize>> {
    let mut idx = Vec::with_capacity(h * w * c * 9);
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                for di in 0..3 {
                    for dj in 0..3 {
                        let (r, s) = (i as i64 + di - 1, j as i64 + dj - 1);
                        if r < 0 || s < 0 || r >= h as i64 || s >= w as i64 {
                            idx.push(None);
                            continue;
                        }
                        let p = r as usize * w + s as usize;
                        idx.push(Some(if channel_major { ch * h * w + p } else { p * c + ch }));
                    }
                }
            }
        }
    }
    idx
}

/// Two 3×3 convolution stages with a GELU in between, then a softmax over
/// depth bins at every feature-grid location.
#[derive(Clone, Debug)]
pub struct DepthNet {
    pub c1: Linear,
    pub c2: Linear,
    pub feat_dim: usize,
    pub hidden: usize,
    pub bins: usize,
}

impl DepthNet {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        feat_dim: usize,
        hidden: usize,
        bins: usize,
        tag: Tag,
    ) -> Result<Self> {
        Ok(DepthNet {
            c1: Linear::new(store, rng, "bev.depth.c1", feat_dim * 9, hidden, true, tag)?,
            c2: Linear::new(store, rng, "bev.depth.c2", hidden * 9, bins, true, tag)?,
            feat_dim,
            hidden,
            bins,
        })
    }

    /// `(logits, probs)`, both `[H·W, N_d]`, for a `[D_p, H, W]` map.
    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, fmap: Var) -> Result<(Var, Var)> {
        let s = g.shape(fmap).to_vec();
        if s.len() != 3 || s[0] != self.feat_dim {
            return Err(Error::shape("depth head", &s, &[self.feat_dim]));
        }
        let (h, w) = (s[1], s[2]);
        let cols = g.gather(fmap, Rc::new(im2col_index(h, w, self.feat_dim, true)), &[h * w, self.feat_dim * 9])?;
        let x = self.c1.forward(g, store, cols)?;
        let x = g.gelu(x);
        let cols = g.gather(x, Rc::new(im2col_index(h, w, self.hidden, false)), &[h * w, self.hidden * 9])?;
        let logits = self.c2.forward(g, store, cols)?;
        let probs = g.softmax(logits);
        Ok((logits, probs))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.c1.params();
        v.extend(self.c2.params());
        v
    }
}
