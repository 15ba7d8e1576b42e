//! Patch-pooled semantic histograms standing in for a learned backbone.

use super::render::RenderedView;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `[D_p, H, W]` feature grid of one view plus the per-patch mean forward
/// depth used to supervise depth prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewFeatureMap {
    pub data: Tensor,
    pub depth_target: Vec<f64>,
}

impl ViewFeatureMap {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}

pub fn feature_channels(n_categories: usize, n_colors: usize) -> usize {
    n_categories + 1 + n_colors + 2
}

/// Per patch: category fractions (`C_obj + 1`), color fractions among
/// object pixels (`C_col`, all zero when the patch has no object), mean
/// and min ray depth.
pub fn extract_view_features(
    view: &RenderedView,
    patch: usize,
    n_categories: usize,
    n_colors: usize,
) -> Result<ViewFeatureMap> {
    if patch == 0 || view.width % patch != 0 || view.height % patch != 0 {
        return Err(Error::Config(format!(
            "image {}x{} not divisible by patch {patch}",
            view.height, view.width
        )));
    }
    let (h, w) = (view.height / patch, view.width / patch);
    let dp = feature_channels(n_categories, n_colors);
    let mut data = vec![0.0; dp * h * w];
    let mut depth_target = vec![0.0; h * w];
    let area = (patch * patch) as f64;
    for pi in 0..h {
        for pj in 0..w {
            let cell = pi * w + pj;
            let mut cats = vec![0.0; n_categories + 1];
            let mut cols = vec![0.0; n_colors];
            let (mut sum_d, mut min_d, mut sum_f) = (0.0, f64::INFINITY, 0.0);
            for r in pi * patch..(pi + 1) * patch {
                for c in pj * patch..(pj + 1) * patch {
                    let i = r * view.width + c;
                    let cat = view.category[i] as usize;
                    if cat > n_categories {
                        return Err(Error::Range(format!("category {cat} > {n_categories}")));
                    }
                    cats[cat] += 1.0;
                    let col = view.color[i] as usize;
                    if col > 0 {
                        if col > n_colors {
                            return Err(Error::Range(format!("color {col} > {n_colors}")));
                        }
                        cols[col - 1] += 1.0;
                    }
                    sum_d += view.depth[i];
                    min_d = min_d.min(view.depth[i]);
                    sum_f += view.forward_depth[i];
                }
            }
            let n_obj: f64 = cols.iter().sum();
            let mut ch = 0;
            for v in cats {
                data[ch * h * w + cell] = v / area;
                ch += 1;
            }
            for v in cols {
                data[ch * h * w + cell] = if n_obj > 0.0 { v / n_obj } else { 0.0 };
                ch += 1;
            }
            data[ch * h * w + cell] = sum_d / area;
            data[(ch + 1) * h * w + cell] = min_d;
            depth_target[cell] = sum_f / area;
        }
    }
    Ok(ViewFeatureMap {
        data: Tensor::new(vec![dp, h, w], data)?,
        depth_target,
    })
}

/// `(cos φ, sin φ, cos ϕ, sin ϕ)` for heading `φ` and elevation `ϕ`.
pub fn orientation_code(heading: f64, elevation: f64) -> [f64; 4] {
    let (s, c) = heading.sin_cos();
    let (se, ce) = elevation.sin_cos();
    [c, s, ce, se]
}
