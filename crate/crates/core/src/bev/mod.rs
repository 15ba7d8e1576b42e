//! Bird's-eye-view perception: a learnable query grid that gathers
//! multi-view features through projected reference points, deformable
//! sampling and depth-consistency weighting, plus the detection head used
//! to pretrain it.

pub mod depth;
pub mod detection;
pub mod encoder;
pub mod geometry;
pub mod train;

pub use depth::{depth_consistency_weight, depth_to_distribution, DepthBins, DepthNet};
pub use detection::{
    detection_loss, eval_map, hungarian, iou_3d, match_costs, visible_objects, BoxParams, Detection, DetectionHead,
    GtBox, LossWeights, MapReport,
};
pub use encoder::{BevEncoder, BevFrameInput, BevModel, BevOutput};
pub use train::{BevFrame, PretrainConfig};
pub use geometry::{ProjPoint, SamplePlan};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BevConfig {
    pub h_b: usize,
    pub w_b: usize,
    /// Perception range (same on both axes), meters.
    pub range: (f64, f64),
    pub n_ref: usize,
    /// Reference-point heights relative to the camera mount, meters.
    pub height_range: (f64, f64),
    pub n_d: usize,
    pub depth_range: (f64, f64),
    pub blocks: usize,
    pub heads: usize,
    pub offsets: usize,
    pub dim: usize,
    pub ffn_mult: usize,
    pub depth_hidden: usize,
    /// Divisor applied to the depth channels of view features, meters.
    pub depth_scale: f64,
}

impl Default for BevConfig {
    fn default() -> Self {
        BevConfig {
            h_b: 15,
            w_b: 15,
            range: (-5.0, 5.0),
            n_ref: 4,
            height_range: (-1.2, 2.0),
            n_d: 8,
            depth_range: (0.5, 8.0),
            blocks: 2,
            heads: 2,
            offsets: 2,
            dim: 64,
            ffn_mult: 2,
            depth_hidden: 16,
            depth_scale: 10.0,
        }
    }
}

impl BevConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.h_b == 0 || self.w_b == 0 {
            return bad("BEV grid must be nonempty");
        }
        if !(self.range.0 < self.range.1) || !(self.height_range.0 <= self.height_range.1) {
            return bad("BEV ranges must be ordered");
        }
        if !(self.depth_range.0 < self.depth_range.1) || self.depth_range.0 <= 0.0 {
            return bad("depth range must be positive and ordered");
        }
        if self.n_ref == 0 || self.n_d < 2 || self.heads == 0 || self.offsets == 0 {
            return bad("n_ref >= 1, n_d >= 2, heads >= 1, offsets >= 1 required");
        }
        if !(self.depth_scale > 0.0) {
            return bad("depth scale must be positive");
        }
        if self.dim % self.heads != 0 {
            return bad("BEV dim must be divisible by heads");
        }
        Ok(())
    }

    pub fn queries(&self) -> usize {
        self.h_b * self.w_b
    }

    /// Ego-frame center `(forward, left)` of cell `q = i·W_b + j`, where
    /// `j` runs along the forward axis and `i` along the left axis.
    pub fn cell_center(&self, q: usize) -> (f64, f64) {
        let (i, j) = (q / self.w_b, q % self.w_b);
        let span = self.range.1 - self.range.0;
        (
            self.range.0 + (j as f64 + 0.5) * span / self.w_b as f64,
            self.range.0 + (i as f64 + 0.5) * span / self.h_b as f64,
        )
    }

    pub fn ref_heights(&self) -> Vec<f64> {
        let (lo, hi) = self.height_range;
        if self.n_ref == 1 {
            return vec![(lo + hi) / 2.0];
        }
        (0..self.n_ref)
            .map(|n| lo + (hi - lo) * n as f64 / (self.n_ref - 1) as f64)
            .collect()
    }
}

/// Sinusoidal encoding of relative cell coordinates, `[Q, D]`.
pub fn positional_encoding(cfg: &BevConfig) -> crate::numerics::Tensor {
    let d = cfg.dim;
    let q = cfg.queries();
    let quarter = (d / 4).max(1);
    let mut out = vec![0.0; q * d];
    for r in 0..q {
        let (x, y) = cfg.cell_center(r);
        for f in 0..quarter {
            let w = 1.0 / 10f64.powf(f as f64 / quarter as f64);
            let vals = [(x * w).sin(), (x * w).cos(), (y * w).sin(), (y * w).cos()];
            for (c, v) in vals.iter().enumerate() {
                let col = c * quarter + f;
                if col < d {
                    out[r * d + col] = *v;
                }
            }
        }
    }
    crate::numerics::Tensor::new(vec![q, d], out).expect("pe shape")
}
