//! Dense per-cell detection head, bipartite matching, the set loss and
//! mAP evaluation.

use rand::Rng;

use super::geometry::world_to_ego;
use super::BevConfig;
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::numerics::{Graph, ParamId, ParameterStore, Tag, Tensor, Var};
use crate::simworld::{Pose, Scene};

/// Box as `(cx, cy, cz, w, l, h)` in the ego frame (`cx` forward, `cy`
/// left, `cz` above the floor).
pub type BoxParams = [f64; 6];

const ANCHOR: [f64; 4] = [0.5, 0.6, 0.6, 0.6];

#[derive(Clone, Debug, PartialEq)]
pub struct GtBox {
    pub class: usize,
    pub bbox: BoxParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub class: usize,
    pub score: f64,
    pub bbox: BoxParams,
}

/// Objects in perception range and in line of sight of the agent.
pub fn visible_objects(scene: &Scene, pose: &Pose, cfg: &BevConfig) -> Vec<GtBox> {
    let (lo, hi) = cfg.range;
    let turned = pose.dir() % 2 == 1;
    scene
        .objects
        .iter()
        .filter(|o| scene.line_of_sight(pose.xy(), (o.center[0], o.center[1])))
        .filter_map(|o| {
            let (f, l) = world_to_ego(pose, o.center[0], o.center[1]);
            if f < lo || f > hi || l < lo || l > hi {
                return None;
            }
            let (w, len) = if turned { (o.size[1], o.size[0]) } else { (o.size[0], o.size[1]) };
            Some(GtBox {
                class: o.category,
                bbox: [f, l, o.center[2], w, len, o.size[2]],
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct DetectionHead {
    pub cls: Linear,
    pub reg: Linear,
    pub n_classes: usize,
    anchors: Tensor,
}

impl DetectionHead {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        cfg: &BevConfig,
        n_classes: usize,
        tag: Tag,
    ) -> Result<Self> {
        let q = cfg.queries();
        let mut a = Vec::with_capacity(q * 6);
        for i in 0..q {
            let (x, y) = cfg.cell_center(i);
            a.extend([x, y]);
            a.extend(ANCHOR);
        }
        Ok(DetectionHead {
            cls: Linear::new(store, rng, "bev.det.cls", cfg.dim, n_classes + 1, true, tag)?,
            reg: Linear::with_std(store, rng, "bev.det.reg", cfg.dim, 6, true, tag, 0.01)?,
            n_classes,
            anchors: Tensor::new(vec![q, 6], a)?,
        })
    }

    /// `(class logits [Q, C+1], boxes [Q, 6])`; the last class is "no object".
    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, b: Var) -> Result<(Var, Var)> {
        let logits = self.cls.forward(g, store, b)?;
        let raw = self.reg.forward(g, store, b)?;
        let anchors = g.constant(self.anchors.clone());
        Ok((logits, g.add(raw, anchors)?))
    }

    /// Scored detections from head outputs: each slot reports its best
    /// object class.
    pub fn decode(logits: &Tensor, boxes: &Tensor, min_score: f64) -> Vec<Detection> {
        let c = logits.cols();
        let mut out = Vec::new();
        for q in 0..logits.rows() {
            let p = softmax(logits.row(q));
            let (class, &score) = p[..c - 1]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .expect("at least one object class");
            if score >= min_score {
                let mut bbox = [0.0; 6];
                bbox.copy_from_slice(boxes.row(q));
                out.push(Detection { class, score, bbox });
            }
        }
        out
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.cls.params();
        v.extend(self.reg.params());
        v
    }
}

/// Greedy class-wise suppression: keeps detections in score order and drops
/// any whose IoU with a kept box of the same class exceeds `iou`.
pub fn suppress(mut dets: Vec<Detection>, iou: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if !kept.iter().any(|k| k.class == d.class && iou_3d(&k.bbox, &d.bbox) > iou) {
            kept.push(d);
        }
    }
    kept
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub boxes: f64,
    /// Cross-entropy weight of unmatched ("no object") slots.
    pub no_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 1.0,
            boxes: 5.0,
            no_object: 0.1,
        }
    }
}

/// Cost matrix `[|gt|][M]` for matching.
pub fn match_costs(logits: &Tensor, boxes: &Tensor, gt: &[GtBox], w: &LossWeights) -> Vec<Vec<f64>> {
    let probs: Vec<Vec<f64>> = (0..logits.rows()).map(|q| softmax(logits.row(q))).collect();
    gt.iter()
        .map(|t| {
            (0..logits.rows())
                .map(|q| {
                    let l1: f64 = boxes.row(q).iter().zip(&t.bbox).map(|(a, b)| (a - b).abs()).sum();
                    w.cls * -probs[q][t.class].max(1e-300).ln() + w.boxes * l1
                })
                .collect()
        })
        .collect()
}

/// Minimum-cost assignment of every row to a distinct column (rows ≤
/// columns). Returns the column of each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = cost[0].len();
    if cost.iter().any(|r| r.len() != m) || n > m {
        return Err(Error::Invalid(format!("cannot assign {n} rows to {m} columns")));
    }
    // Potentials-based shortest augmenting path, 1-indexed with a dummy 0.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            if !delta.is_finite() {
                return Err(Error::Numeric("non-finite matching cost".into()));
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    Ok(out)
}

/// `λ_cls · CE(all slots) + λ_box · Σ ℓ1(matched boxes)`. Unmatched slots
/// target the no-object class.
pub fn detection_loss(
    g: &mut Graph,
    logits: Var,
    boxes: Var,
    gt: &[GtBox],
    assignment: &[usize],
    w: &LossWeights,
) -> Result<Var> {
    let (m, c) = (g.shape(logits)[0], g.shape(logits)[1]);
    if assignment.len() != gt.len() {
        return Err(Error::shape("detection assignment", &[assignment.len()], &[gt.len()]));
    }
    let mut targets = vec![c - 1; m];
    let mut weights = vec![w.no_object; m];
    for (t, &slot) in gt.iter().zip(assignment) {
        targets[slot] = t.class;
        weights[slot] = 1.0;
    }
    let total: f64 = weights.iter().sum();
    let ce = g.cross_entropy_weighted(logits, &targets, &weights, total)?;
    let ce = g.scale(ce, w.cls);
    if gt.is_empty() {
        return Ok(ce);
    }
    let pred = g.row_gather(boxes, assignment)?;
    let target: Vec<f64> = gt.iter().flat_map(|t| t.bbox).collect();
    let target = g.constant(Tensor::new(vec![gt.len(), 6], target)?);
    let l1 = g.l1(pred, target)?;
    let l1 = g.scale(l1, w.boxes);
    g.add(ce, l1)
}

/// Axis-aligned 3D IoU.
pub fn iou_3d(a: &BoxParams, b: &BoxParams) -> f64 {
    let mut inter = 1.0;
    for i in 0..3 {
        let lo = (a[i] - a[i + 3] / 2.0).max(b[i] - b[i + 3] / 2.0);
        let hi = (a[i] + a[i + 3] / 2.0).min(b[i] + b[i + 3] / 2.0);
        inter *= (hi - lo).max(0.0);
    }
    let va = a[3] * a[4] * a[5];
    let vb = b[3] * b[4] * b[5];
    let union = va + vb - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapReport {
    pub map: f64,
    /// `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
}

impl MapReport {
    pub fn table(&self, names: &[&str]) -> String {
        let mut s = format!("{:<10} {:>8}\n", "class", "AP");
        for (i, ap) in self.per_class.iter().enumerate() {
            let name = names.get(i).copied().unwrap_or("?");
            match ap {
                Some(v) => s += &format!("{name:<10} {v:>8.4}\n"),
                None => s += &format!("{name:<10} {:>8}\n", "-"),
            }
        }
        s += &format!("{:<10} {:>8.4}\n", "mAP", self.map);
        s
    }
}

/// Average precision by all-points interpolation of a ranked TP/FP list.
pub fn average_precision(hits: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0.0;
    let mut recall = vec![0.0];
    let mut precision = vec![1.0];
    for (i, &h) in hits.iter().enumerate() {
        if h {
            tp += 1.0;
        }
        recall.push(tp / n_gt as f64);
        precision.push(tp / (i + 1) as f64);
    }
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (1..recall.len()).map(|i| (recall[i] - recall[i - 1]) * precision[i]).sum()
}

/// Per-class AP with greedy IoU matching in confidence order; mAP is the
/// mean over classes that have ground truth.
pub fn eval_map(preds: &[Vec<Detection>], gts: &[Vec<GtBox>], n_classes: usize, iou_threshold: f64) -> MapReport {
    let mut per_class = vec![None; n_classes];
    for (c, slot) in per_class.iter_mut().enumerate() {
        let n_gt: usize = gts.iter().map(|g| g.iter().filter(|b| b.class == c).count()).sum();
        if n_gt == 0 {
            continue;
        }
        let mut dets: Vec<(usize, &Detection)> = preds
            .iter()
            .enumerate()
            .flat_map(|(f, d)| d.iter().filter(|x| x.class == c).map(move |x| (f, x)))
            .collect();
        dets.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
        let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let hits: Vec<bool> = dets
            .iter()
            .map(|(f, d)| {
                let best = gts.get(*f).into_iter().flatten().enumerate().filter(|(i, g)| g.class == c && !taken[*f][*i]).map(|(i, g)| (i, iou_3d(&d.bbox, &g.bbox))).max_by(|a, b| a.1.total_cmp(&b.1));
                match best {
                    Some((i, iou)) if iou >= iou_threshold => {
                        taken[*f][i] = true;
                        true
                    }
                    _ => false,
                }
            })
            .collect();
        *slot = Some(average_precision(&hits, n_gt));
    }
    let aps: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
    MapReport { map, per_class }
}
