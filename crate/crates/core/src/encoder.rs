//! Per-view perspective tokens and action tokens.
//!
//! `p_{t,k} = E^p(pool F_{t,k}) + E^δ(δ_{t,k}) + E_t[t] + E_o`
//! `a_t     = E^a(pool F_{t,a}) + E^δ(δ_{t,a}) + E_t[t] + E_a`
//!
//! `pool` is the spatial mean over the feature grid. For STOP (`a = 0`) a
//! learned feature vector replaces the pooled observation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::numerics::{Graph, ParamId, ParameterStore, Tag, Tensor, Var};
use crate::simworld::{EpisodeRecord, ViewFeatureMap};

#[derive(Clone, Debug)]
pub struct EmbeddingTables {
    pub e_p: Linear,
    pub e_a: Linear,
    pub e_delta: Linear,
    pub e_t: ParamId,
    pub e_o: ParamId,
    pub e_a_type: ParamId,
    pub stop_feature: ParamId,
    pub t_max: usize,
    pub dim: usize,
    pub feat_dim: usize,
}

/// Constant per-episode encoder inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeInputs {
    pub steps: usize,
    pub views: usize,
    /// `[T·K, D_p]` pooled view features, step-major.
    pub pooled: Tensor,
    /// `[T·K, 4]` orientation codes.
    pub codes: Tensor,
    /// `[T, D_p]` pooled features of each action view (zero rows for STOP).
    pub action_pooled: Tensor,
    /// `[T, 4]` orientation codes of the action views.
    pub action_codes: Tensor,
    /// Action view index per step (0 = STOP).
    pub action_views: Vec<usize>,
}

/// Spatial mean of a `[D_p, H, W]` map.
pub fn pool(f: &ViewFeatureMap) -> Vec<f64> {
    let hw = f.height() * f.width();
    f.data
        .data()
        .chunks(hw)
        .map(|c| c.iter().sum::<f64>() / hw as f64)
        .collect()
}

impl EpisodeInputs {
    pub fn from_record(ep: &EpisodeRecord) -> Result<Self> {
        let t = ep.steps();
        let k = ep.orientations.len();
        let mut pooled = Vec::new();
        let mut codes = Vec::new();
        let mut action_pooled = Vec::new();
        let mut action_codes = Vec::new();
        let views = ep.action_views();
        let dp = ep.features[0][0].channels();
        for (step, feats) in ep.features.iter().enumerate() {
            if feats.len() != k {
                return Err(Error::shape("episode views", &[feats.len()], &[k]));
            }
            let pooled_step: Vec<Vec<f64>> = feats.iter().map(pool).collect();
            for (v, code) in pooled_step.iter().zip(&ep.orientations) {
                pooled.extend_from_slice(v);
                codes.extend_from_slice(code);
            }
            let a = views[step];
            if a > k {
                return Err(Error::Range(format!("action view {a} with {k} views")));
            }
            if a == 0 {
                action_pooled.extend(std::iter::repeat_n(0.0, dp));
                action_codes.extend_from_slice(&ep.orientations[0]);
            } else {
                action_pooled.extend_from_slice(&pooled_step[a - 1]);
                action_codes.extend_from_slice(&ep.orientations[a - 1]);
            }
        }
        Ok(EpisodeInputs {
            steps: t,
            views: k,
            pooled: Tensor::new(vec![t * k, dp], pooled)?,
            codes: Tensor::new(vec![t * k, 4], codes)?,
            action_pooled: Tensor::new(vec![t, dp], action_pooled)?,
            action_codes: Tensor::new(vec![t, 4], action_codes)?,
            action_views: views,
        })
    }
}

impl EmbeddingTables {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        feat_dim: usize,
        dim: usize,
        t_max: usize,
        tag: Tag,
    ) -> Result<Self> {
        Ok(EmbeddingTables {
            e_p: Linear::new(store, rng, "enc.e_p", feat_dim, dim, true, tag)?,
            e_a: Linear::new(store, rng, "enc.e_a", feat_dim, dim, true, tag)?,
            e_delta: Linear::new(store, rng, "enc.e_delta", 4, dim, false, tag)?,
            e_t: store.add_normal("enc.e_t", &[t_max, dim], 0.1, tag, rng)?,
            e_o: store.add_normal("enc.e_o", &[dim], 0.1, tag, rng)?,
            e_a_type: store.add_normal("enc.e_a_type", &[dim], 0.1, tag, rng)?,
            stop_feature: store.add_normal("enc.stop", &[feat_dim], 0.1, tag, rng)?,
            t_max,
            dim,
            feat_dim,
        })
    }

    fn check_steps(&self, steps: &[usize]) -> Result<()> {
        match steps.iter().find(|&&t| t >= self.t_max) {
            Some(t) => Err(Error::Range(format!("time step {t} >= T_max {}", self.t_max))),
            None => Ok(()),
        }
    }

    /// Rows `p` for pooled features `[N, D_p]`, codes `[N, 4]` and the step
    /// index of each row.
    pub fn perspective(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        pooled: Var,
        codes: Var,
        steps: &[usize],
    ) -> Result<Var> {
        self.check_steps(steps)?;
        let a = self.e_p.forward(g, store, pooled)?;
        let b = self.e_delta.forward(g, store, codes)?;
        let et = g.param(store, self.e_t);
        let t = g.row_gather(et, steps)?;
        let s = g.add(a, b)?;
        let s = g.add(s, t)?;
        let eo = g.param(store, self.e_o);
        g.add_row(s, eo)
    }

    /// Action rows; `views[i] == 0` substitutes the learned STOP feature.
    pub fn action(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        pooled: Var,
        codes: Var,
        steps: &[usize],
        views: &[usize],
    ) -> Result<Var> {
        self.check_steps(steps)?;
        let n = g.shape(pooled)[0];
        if views.len() != n {
            return Err(Error::shape("action views", &[views.len()], &[n]));
        }
        let stop = g.param(store, self.stop_feature);
        let stop = g.reshape(stop, &[1, self.feat_dim])?;
        let table = g.concat_rows(&[pooled, stop])?;
        let idx: Vec<usize> = views.iter().enumerate().map(|(i, &v)| if v == 0 { n } else { i }).collect();
        let x = g.row_gather(table, &idx)?;
        let a = self.e_a.forward(g, store, x)?;
        let b = self.e_delta.forward(g, store, codes)?;
        let et = g.param(store, self.e_t);
        let t = g.row_gather(et, steps)?;
        let s = g.add(a, b)?;
        let s = g.add(s, t)?;
        let ea = g.param(store, self.e_a_type);
        g.add_row(s, ea)
    }

    /// `(P, A)` for an episode: `P` is `[T·K, D]` step-major, `A` is `[T, D]`.
    pub fn episode(&self, g: &mut Graph, store: &ParameterStore, inp: &EpisodeInputs) -> Result<(Var, Var)> {
        let pooled = g.constant(inp.pooled.clone());
        let codes = g.constant(inp.codes.clone());
        let steps: Vec<usize> = (0..inp.steps).flat_map(|t| std::iter::repeat_n(t, inp.views)).collect();
        let p = self.perspective(g, store, pooled, codes, &steps)?;
        let ap = g.constant(inp.action_pooled.clone());
        let ac = g.constant(inp.action_codes.clone());
        let tsteps: Vec<usize> = (0..inp.steps).collect();
        let a = self.action(g, store, ap, ac, &tsteps, &inp.action_views)?;
        Ok((p, a))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.e_p.params();
        v.extend(self.e_a.params());
        v.extend(self.e_delta.params());
        v.extend([self.e_t, self.e_o, self.e_a_type, self.stop_feature]);
        v
    }
}
