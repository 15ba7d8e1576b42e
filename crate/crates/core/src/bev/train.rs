//! Detection pretraining of the BEV stack.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::detection::{detection_loss, hungarian, match_costs, visible_objects, Detection, DetectionHead, GtBox, LossWeights, MapReport};
use super::encoder::{BevFrameInput, BevModel};
use super::eval_map;
use crate::error::{Error, Result};
use crate::numerics::{AdamW, Grads, Graph, ParameterStore, Precision, Var};
use crate::simworld::{mix_seed, CameraModel, Pose, Scene, ViewFeatureMap};

/// One observation with its detection targets.
#[derive(Clone, Debug)]
pub struct BevFrame {
    pub input: BevFrameInput,
    pub gt: Vec<GtBox>,
}

impl BevFrame {
    pub fn new(
        model: &BevModel,
        scene: &Scene,
        pose: &Pose,
        views: &[ViewFeatureMap],
        cams: &[CameraModel],
        patch: usize,
    ) -> Result<Self> {
        Ok(BevFrame {
            input: model.frame_input(views, cams, pose, patch)?,
            gt: visible_objects(scene, pose, &model.cfg),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Final learning rate of the cosine schedule.
    pub lr_min: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Weight of the depth-head supervision.
    pub depth_weight: f64,
    pub clip: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 48,
            batch: 8,
            lr: 2e-3,
            lr_min: 1e-4,
            seed: 0,
            weights: LossWeights::default(),
            depth_weight: 1.0,
            clip: 1.0,
        }
    }
}

/// Detection plus depth loss of one frame.
pub fn frame_loss(
    model: &BevModel,
    g: &mut Graph,
    store: &ParameterStore,
    frame: &BevFrame,
    cfg: &PretrainConfig,
) -> Result<Var> {
    let out = model.encode(g, store, &frame.input)?;
    let (logits, boxes) = model.detection.forward(g, store, out.features)?;
    let costs = match_costs(g.value(logits), g.value(boxes), &frame.gt, &cfg.weights);
    let assignment = hungarian(&costs)?;
    let det = detection_loss(g, logits, boxes, &frame.gt, &assignment, &cfg.weights)?;
    let depth = model.depth_loss(g, &frame.input, &out.depth_logits)?;
    let depth = g.scale(depth, cfg.depth_weight);
    g.add(det, depth)
}

/// Minibatch AdamW over shuffled frames. Returns the mean loss of each epoch.
pub fn pretrain(
    model: &BevModel,
    store: &mut ParameterStore,
    frames: &[BevFrame],
    cfg: &PretrainConfig,
    on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    pretrain_epochs(model, store, frames, cfg, 0..cfg.epochs, on_epoch)
}

/// Runs a contiguous range of the `cfg.epochs` schedule. The shuffle and
/// learning rate depend only on the epoch index, so a run split at any
/// epoch boundary (with the optimizer state carried in the store) matches
/// an uninterrupted one.
pub fn pretrain_epochs(
    model: &BevModel,
    store: &mut ParameterStore,
    frames: &[BevFrame],
    cfg: &PretrainConfig,
    epochs: std::ops::Range<usize>,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if frames.is_empty() || cfg.batch == 0 {
        return Err(Error::Invalid("pretraining needs frames and a positive batch".into()));
    }
    if epochs.end > cfg.epochs {
        return Err(Error::Invalid(format!("epoch range ends past the {}-epoch schedule", cfg.epochs)));
    }
    let steps_per_epoch = frames.len().div_ceil(cfg.batch);
    let total_steps = (steps_per_epoch * cfg.epochs).max(1);
    let mut history = Vec::with_capacity(epochs.len());
    for epoch in epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64));
        let mut order: Vec<usize> = (0..frames.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            let step = epoch * steps_per_epoch + b;
            let mut grads = Grads::new();
            for &i in chunk {
                let mut g = Graph::new(Precision::F64);
                let loss = frame_loss(model, &mut g, store, &frames[i], cfg)?;
                let l = g.value(loss).item();
                if !l.is_finite() {
                    return Err(Error::Numeric(format!("non-finite detection loss at epoch {epoch}, step {step}")));
                }
                total += l;
                grads.merge(&g.backward(loss)?.param_grads());
            }
            grads.scale(1.0 / chunk.len() as f64);
            grads.clip_global_norm(cfg.clip);
            let progress = step as f64 / total_steps as f64;
            let lr = cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos());
            AdamW { lr, ..AdamW::default() }.step(store, &grads)?;
        }
        let mean = total / frames.len() as f64;
        on_epoch(epoch, mean);
        history.push(mean);
    }
    Ok(history)
}

/// Detections of every frame.
pub fn detect(model: &BevModel, store: &ParameterStore, frames: &[BevFrame], min_score: f64) -> Result<Vec<Vec<Detection>>> {
    frames
        .iter()
        .map(|f| {
            let mut g = Graph::new(Precision::F64);
            let out = model.encode(&mut g, store, &f.input)?;
            let (logits, boxes) = model.detection.forward(&mut g, store, out.features)?;
            Ok(DetectionHead::decode(g.value(logits), g.value(boxes), min_score))
        })
        .collect()
}

pub fn evaluate(model: &BevModel, store: &ParameterStore, frames: &[BevFrame]) -> Result<MapReport> {
    let preds = detect(model, store, frames, 0.01)?;
    let gts: Vec<Vec<GtBox>> = frames.iter().map(|f| f.gt.clone()).collect();
    Ok(eval_map(&preds, &gts, model.detection.n_classes, 0.5))
}
