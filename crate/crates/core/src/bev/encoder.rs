//! Deformable BEV encoder. Each block lets every grid query sample the
//! camera feature maps around its projected reference points, weighting
//! samples by learned attention times depth consistency.

use std::rc::Rc;

use rand::Rng;

use super::depth::{depth_to_distribution, DepthBins, DepthNet};
use super::detection::DetectionHead;
use super::geometry::SamplePlan;
use super::{positional_encoding, BevConfig};
use crate::error::{Error, Result};
use crate::layers::{FeedForward, LayerNorm, Linear};
use crate::numerics::{Graph, ParamId, ParameterStore, Precision, Tag, Tensor, Var};
use crate::simworld::{CameraModel, Pose, ViewFeatureMap};

/// Trailing depth channels of a view feature map (mean and min depth).
const DEPTH_CHANNELS: usize = 2;

/// Constant per-observation inputs of the encoder.
#[derive(Clone, Debug)]
pub struct BevFrameInput {
    /// `[D_p, H, W]` per camera, depth channels divided by the depth scale.
    pub maps: Vec<Tensor>,
    /// `[H·W, D_p]` per camera.
    pub pixels: Vec<Tensor>,
    /// Patch-mean forward depth per camera, `H·W` values.
    pub depth_targets: Vec<Vec<f64>>,
    pub plan: SamplePlan,
    /// `[N_pts, N_d]` parameter-free depth distribution of each point.
    pub point_depth: Tensor,
    /// `[N_pts, 2]` texel coordinates of each point.
    pub point_locs: Tensor,
}

impl BevFrameInput {
    pub fn new(
        cfg: &BevConfig,
        bins: &DepthBins,
        views: &[ViewFeatureMap],
        cams: &[CameraModel],
        pose: &Pose,
        patch: usize,
    ) -> Result<Self> {
        if views.len() != cams.len() {
            return Err(Error::shape("bev views", &[views.len()], &[cams.len()]));
        }
        let plan = SamplePlan::build(cfg, cams, pose, patch);
        let mut pixels = Vec::new();
        let mut maps = Vec::new();
        for v in views {
            let (c, hw) = (v.channels(), v.height() * v.width());
            let mut d = v.data.data().to_vec();
            for x in &mut d[(c - DEPTH_CHANNELS) * hw..] {
                *x /= cfg.depth_scale;
            }
            let mut t = vec![0.0; hw * c];
            for ch in 0..c {
                for p in 0..hw {
                    t[p * c + ch] = d[ch * hw + p];
                }
            }
            pixels.push(Tensor::new(vec![hw, c], t)?);
            maps.push(Tensor::new(v.data.shape().to_vec(), d)?);
        }
        let nd = bins.len();
        let mut depth = Vec::with_capacity(plan.points.len() * nd);
        let mut locs = Vec::with_capacity(plan.points.len() * 2);
        for p in &plan.points {
            depth.extend(depth_to_distribution(p.depth, bins));
            locs.extend([p.u, p.v]);
        }
        let n = plan.points.len();
        Ok(BevFrameInput {
            maps,
            pixels,
            depth_targets: views.iter().map(|v| v.depth_target.clone()).collect(),
            point_depth: Tensor::new(vec![n, nd], depth)?,
            point_locs: Tensor::new(vec![n, 2], locs)?,
            plan,
        })
    }

    fn feature_hw(&self) -> (usize, usize) {
        let s = self.maps[0].shape();
        (s[1], s[2])
    }
}

#[derive(Clone, Debug)]
pub struct BevBlock {
    pub offsets: Linear,
    pub attn: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ln1: LayerNorm,
    pub ffn: FeedForward,
    pub ln2: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct BevEncoder {
    pub blocks: Vec<BevBlock>,
    pub heads: usize,
    pub n_ref: usize,
    pub n_off: usize,
    pub dim: usize,
}

impl BevEncoder {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        cfg: &BevConfig,
        feat_dim: usize,
        tag: Tag,
    ) -> Result<Self> {
        let (d, h) = (cfg.dim, cfg.heads);
        let samples = h * cfg.n_ref * cfg.offsets;
        let mut blocks = Vec::new();
        for b in 0..cfg.blocks {
            let n = |s: &str| format!("bev.enc{b}.{s}");
            blocks.push(BevBlock {
                offsets: Linear::with_std(store, rng, &n("off"), d, samples * 2, true, tag, 0.0)?,
                attn: Linear::new(store, rng, &n("attn"), d, samples, true, tag)?,
                value: Linear::new(store, rng, &n("value"), feat_dim, d, true, tag)?,
                out: Linear::new(store, rng, &n("out"), d, d, true, tag)?,
                ln1: LayerNorm::new(store, &n("ln1"), d, tag)?,
                ffn: FeedForward::new(store, rng, &n("ffn"), d, d * cfg.ffn_mult, tag)?,
                ln2: LayerNorm::new(store, &n("ln2"), d, tag)?,
            });
        }
        Ok(BevEncoder {
            blocks,
            heads: h,
            n_ref: cfg.n_ref,
            n_off: cfg.offsets,
            dim: d,
        })
    }

    /// Depth-and-attention weighted sum of deformable samples, `[Q, D]`,
    /// before the output projection. `query` is the positionally encoded
    /// query matrix and `wc` the `[N_pts]` depth-consistency weights.
    pub fn aggregate(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        block: &BevBlock,
        query: Var,
        frame: &BevFrameInput,
        wc: Var,
    ) -> Result<Var> {
        let plan = &frame.plan;
        let (q_n, k_n, r_n, o_n) = (plan.queries, plan.cameras, self.n_ref, self.n_off);
        let dh = self.dim / self.heads;
        let (fh, fw) = frame.feature_hw();
        let hw = fh * fw;
        let slots = k_n * r_n * o_n;
        let off = block.offsets.forward(g, store, query)?;
        let logits = block.attn.forward(g, store, query)?;
        let off_cols = self.heads * r_n * o_n * 2;
        let att_cols = self.heads * r_n * o_n;

        let values: Vec<Var> = frame
            .pixels
            .iter()
            .map(|p| {
                let x = g.constant(p.clone());
                block.value.forward(g, store, x)
            })
            .collect::<Result<_>>()?;
        let base = g.constant(frame.point_locs.clone());

        let mut mask = vec![f64::NEG_INFINITY; q_n * slots];
        for q in 0..q_n {
            for k in 0..k_n {
                for n in 0..r_n {
                    if plan.slot_point[(q * k_n + k) * r_n + n].is_some() {
                        let s = (k * r_n + n) * o_n;
                        mask[q * slots + s..q * slots + s + o_n].fill(0.0);
                    }
                }
            }
        }
        let mask = g.constant(Tensor::new(vec![q_n, slots], mask)?);
        // Samples are ordered like plan points, offsets innermost.
        let n_samples = plan.points.len() * o_n;
        let seg: Rc<Vec<usize>> = Rc::new(plan.points.iter().flat_map(|p| std::iter::repeat_n(p.query, o_n)).collect());
        let slot_of: Rc<Vec<Option<usize>>> = Rc::new(
            plan.points
                .iter()
                .flat_map(|p| (0..o_n).map(move |o| Some(p.query * slots + (p.camera * r_n + p.ref_index) * o_n + o)))
                .collect(),
        );
        let point_of: Rc<Vec<Option<usize>>> = Rc::new((0..n_samples).map(|i| Some(i / o_n)).collect());
        let wc_samples = g.gather(wc, point_of, &[n_samples])?;

        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            if n_samples == 0 {
                heads.push(g.constant(Tensor::zeros(&[q_n, dh])));
                continue;
            }
            let mut sampled = Vec::new();
            for k in 0..k_n {
                let range = plan.camera_range(k);
                if range.is_empty() {
                    continue;
                }
                let t_idx: Vec<Option<usize>> = (0..dh)
                    .flat_map(|c| (0..hw).map(move |p| Some(p * self.dim + h * dh + c)))
                    .collect();
                let fmap = g.gather(values[k], Rc::new(t_idx), &[dh, fh, fw])?;
                let mut off_idx = Vec::with_capacity(range.len() * o_n * 2);
                let mut base_idx = Vec::with_capacity(range.len() * o_n * 2);
                for pi in range.clone() {
                    let pt = &plan.points[pi];
                    for o in 0..o_n {
                        for c in 0..2 {
                            off_idx.push(Some(pt.query * off_cols + ((h * r_n + pt.ref_index) * o_n + o) * 2 + c));
                            base_idx.push(Some(pi * 2 + c));
                        }
                    }
                }
                let n_s = range.len() * o_n;
                let o_v = g.gather(off, Rc::new(off_idx), &[n_s, 2])?;
                let b_v = g.gather(base, Rc::new(base_idx), &[n_s, 2])?;
                let locs = g.add(b_v, o_v)?;
                sampled.push(g.bilinear_sample(fmap, locs)?);
            }
            let v = g.concat_rows(&sampled)?;
            let l_idx: Vec<Option<usize>> = (0..q_n)
                .flat_map(|q| {
                    (0..k_n * r_n)
                        .flat_map(move |kn| (0..o_n).map(move |o| Some(q * att_cols + (h * r_n + kn % r_n) * o_n + o)))
                })
                .collect();
            let l = g.gather(logits, Rc::new(l_idx), &[q_n, slots])?;
            let l = g.add(l, mask)?;
            let p = g.softmax(l);
            let p = g.gather(p, slot_of.clone(), &[n_samples])?;
            let w = g.mul(p, wc_samples)?;
            heads.push(g.segment_sum(w, v, seg.clone(), q_n)?);
        }
        g.concat_cols(&heads)
    }

    /// Runs all blocks on queries `x` (`[Q, D]`) with positional encoding
    /// `pe`. Queries with no visible sample pass through unchanged.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        x: Var,
        pe: Var,
        frame: &BevFrameInput,
        wc: Var,
    ) -> Result<Var> {
        let visible = frame.plan.visible_counts();
        let q_n = visible.len();
        let blend: Vec<usize> = visible
            .iter()
            .enumerate()
            .map(|(q, &c)| if c > 0 { q } else { q_n + q })
            .collect();
        let mut x = x;
        for block in &self.blocks {
            let query = g.add(x, pe)?;
            let agg = self.aggregate(g, store, block, query, frame, wc)?;
            let a = block.out.forward(g, store, agg)?;
            let y = g.add(x, a)?;
            let y = block.ln1.forward(g, store, y)?;
            let f = block.ffn.forward(g, store, y)?;
            let y2 = g.add(y, f)?;
            let y2 = block.ln2.forward(g, store, y2)?;
            let both = g.concat_rows(&[y2, x])?;
            x = g.row_gather(both, &blend)?;
        }
        Ok(x)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        for b in &self.blocks {
            for l in [&b.offsets, &b.attn, &b.value, &b.out, &b.ffn.up, &b.ffn.down] {
                v.extend(l.params());
            }
            v.extend([b.ln1.gain, b.ln1.bias, b.ln2.gain, b.ln2.bias]);
        }
        v
    }
}

/// Query grid, encoder, depth head and detection head.
#[derive(Clone, Debug)]
pub struct BevModel {
    pub cfg: BevConfig,
    pub bins: DepthBins,
    pub grid: ParamId,
    pub pe: Tensor,
    pub encoder: BevEncoder,
    pub depth: DepthNet,
    pub detection: DetectionHead,
}

/// Graph outputs of one encoded frame.
#[derive(Clone, Debug)]
pub struct BevOutput {
    pub features: Var,
    pub wc: Var,
    /// Depth-head logits `[H·W, N_d]` per camera.
    pub depth_logits: Vec<Var>,
}

impl BevModel {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        cfg: &BevConfig,
        feat_dim: usize,
        n_classes: usize,
        tag: Tag,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(BevModel {
            cfg: cfg.clone(),
            bins: DepthBins::from_config(cfg)?,
            grid: store.add_normal("bev.grid", &[cfg.queries(), cfg.dim], 0.1, tag, rng)?,
            pe: positional_encoding(cfg),
            encoder: BevEncoder::new(store, rng, cfg, feat_dim, tag)?,
            depth: DepthNet::new(store, rng, feat_dim, cfg.depth_hidden, cfg.n_d, tag)?,
            detection: DetectionHead::new(store, rng, cfg, n_classes, tag)?,
        })
    }

    pub fn frame_input(
        &self,
        views: &[ViewFeatureMap],
        cams: &[CameraModel],
        pose: &Pose,
        patch: usize,
    ) -> Result<BevFrameInput> {
        BevFrameInput::new(&self.cfg, &self.bins, views, cams, pose, patch)
    }

    /// Depth-consistency weights of every plan point, `[N_pts]`.
    pub fn depth_weights(&self, g: &mut Graph, store: &ParameterStore, frame: &BevFrameInput) -> Result<(Var, Vec<Var>)> {
        let (fh, fw) = frame.feature_hw();
        let nd = self.bins.len();
        let mut logits = Vec::new();
        let mut sampled = Vec::new();
        let t_idx: Rc<Vec<Option<usize>>> =
            Rc::new((0..nd).flat_map(|b| (0..fh * fw).map(move |p| Some(p * nd + b))).collect());
        for (k, map) in frame.maps.iter().enumerate() {
            let f = g.constant(map.clone());
            let (l, p) = self.depth.forward(g, store, f)?;
            logits.push(l);
            let range = frame.plan.camera_range(k);
            if range.is_empty() {
                continue;
            }
            let pm = g.gather(p, t_idx.clone(), &[nd, fh, fw])?;
            let locs = frame.point_locs.data()[range.start * 2..range.end * 2].to_vec();
            let locs = g.constant(Tensor::new(vec![range.len(), 2], locs)?);
            sampled.push(g.bilinear_sample(pm, locs)?);
        }
        let wc = if sampled.is_empty() {
            g.constant(Tensor::zeros(&[0]))
        } else {
            let pred = g.concat_rows(&sampled)?;
            let target = g.constant(frame.point_depth.clone());
            g.cosine_rows(pred, target)?
        };
        Ok((wc, logits))
    }

    pub fn encode(&self, g: &mut Graph, store: &ParameterStore, frame: &BevFrameInput) -> Result<BevOutput> {
        let (wc, depth_logits) = self.depth_weights(g, store, frame)?;
        let x = g.param(store, self.grid);
        let pe = g.constant(self.pe.clone());
        let features = self.encoder.forward(g, store, x, pe, frame, wc)?;
        Ok(BevOutput {
            features,
            wc,
            depth_logits,
        })
    }

    /// `B_t` as a plain tensor.
    pub fn encode_value(&self, store: &ParameterStore, frame: &BevFrameInput) -> Result<Tensor> {
        let mut g = Graph::new(Precision::F64);
        let out = self.encode(&mut g, store, frame)?;
        Ok(g.value(out.features).clone())
    }

    /// Soft-target cross-entropy of the depth head against the rendered
    /// patch depths, averaged over pixels.
    pub fn depth_loss(&self, g: &mut Graph, frame: &BevFrameInput, logits: &[Var]) -> Result<Var> {
        let mut parts = Vec::new();
        for (l, target) in logits.iter().zip(&frame.depth_targets) {
            let mut rows = Vec::new();
            let mut targets = Vec::new();
            let mut weights = Vec::new();
            for (p, &d) in target.iter().enumerate() {
                for (b, &w) in depth_to_distribution(d, &self.bins).iter().enumerate() {
                    if w > 0.0 {
                        rows.push(p);
                        targets.push(b);
                        weights.push(w);
                    }
                }
            }
            let dup = g.row_gather(*l, &rows)?;
            parts.push(g.cross_entropy_weighted(dup, &targets, &weights, target.len() as f64)?);
        }
        let mut total = parts[0];
        for p in &parts[1..] {
            total = g.add(total, *p)?;
        }
        Ok(g.scale(total, 1.0 / parts.len() as f64))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.grid];
        v.extend(self.encoder.params());
        v.extend(self.depth.params());
        v.extend(self.detection.params());
        v
    }
}
