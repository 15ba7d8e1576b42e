//! Central finite-difference verification of reverse-mode gradients.

use super::graph::{Graph, Precision, Var};
use super::params::{ParameterStore, Tag};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Settings for a finite-difference comparison.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Central-difference step.
    pub h: f64,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is ~0 are judged on an absolute scale.
    pub floor: f64,
    /// Upper bound on checked entries per tensor (evenly strided).
    pub max_entries: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            h: 1e-5,
            floor: 1e-6,
            max_entries: 48,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Tensor name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    fn record(&mut self, name: &str, idx: usize, analytic: f64, numeric: f64, floor: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(floor);
        let rel = (analytic - numeric).abs() / denom;
        self.checked += 1;
        if rel > self.max_rel_err || self.worst.is_none() {
            if rel >= self.max_rel_err {
                self.max_rel_err = rel;
            }
            self.worst = Some((name.to_string(), idx));
        }
    }
}

fn entries(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        let stride = n as f64 / max as f64;
        (0..max).map(|i| (i as f64 * stride) as usize).collect()
    }
}

impl GradCheck {
    /// Compares gradients of a scalar computation with respect to every
    /// TUNED parameter; FROZEN parameters are skipped.
    pub fn check_params<F>(&self, store: &mut ParameterStore, f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, &ParameterStore) -> Result<Var>,
    {
        let mut g = Graph::new(Precision::F64);
        let out = f(&mut g, store)?;
        let grads = g.backward(out)?.param_grads();
        let mut report = GradCheckReport::default();
        let ids: Vec<_> = store.ids().filter(|&id| store.tag(id) == Tag::Tuned).collect();
        for id in ids {
            let Some(analytic) = grads.get(id).cloned() else { continue };
            let name = store.param(id).name().to_string();
            for j in entries(analytic.numel(), self.max_entries) {
                let orig = store.value(id).data()[j];
                store.value_mut(id).data_mut()[j] = orig + self.h;
                let fp = eval(&f, store)?;
                store.value_mut(id).data_mut()[j] = orig - self.h;
                let fm = eval(&f, store)?;
                store.value_mut(id).data_mut()[j] = orig;
                let numeric = (fp - fm) / (2.0 * self.h);
                report.record(&name, j, analytic.data()[j], numeric, self.floor);
            }
        }
        Ok(report)
    }

    /// Compares gradients with respect to explicit input tensors.
    pub fn check_inputs<F>(&self, inputs: &[Tensor], f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        self.check_inputs_masked(inputs, &vec![true; inputs.len()], f)
    }

    /// Like [`check_inputs`](Self::check_inputs) but only differentiates
    /// inputs whose mask entry is true; the rest enter as constants.
    pub fn check_inputs_masked<F>(
        &self,
        inputs: &[Tensor],
        differentiate: &[bool],
        f: F,
    ) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let run = |vals: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
            let mut g = Graph::new(Precision::F64);
            let vars: Vec<Var> = vals
                .iter()
                .zip(differentiate)
                .map(|(t, &d)| if d { g.input(t.clone()) } else { g.constant(t.clone()) })
                .collect();
            let out = f(&mut g, &vars)?;
            if g.value(out).numel() != 1 {
                return Err(Error::shape("grad_check", g.shape(out), &[1]));
            }
            Ok((g, vars, out))
        };
        let (g, vars, out) = run(inputs)?;
        let grads = g.backward(out)?;
        let mut report = GradCheckReport::default();
        let mut work: Vec<Tensor> = inputs.to_vec();
        for (i, v) in vars.iter().enumerate() {
            if !differentiate[i] {
                continue;
            }
            let analytic = grads
                .of(*v)
                .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
            for j in entries(analytic.numel(), self.max_entries) {
                let orig = work[i].data()[j];
                work[i].data_mut()[j] = orig + self.h;
                let (gp, _, op) = run(&work)?;
                let fp = gp.value(op).item();
                work[i].data_mut()[j] = orig - self.h;
                let (gm, _, om) = run(&work)?;
                let fm = gm.value(om).item();
                work[i].data_mut()[j] = orig;
                let numeric = (fp - fm) / (2.0 * self.h);
                report.record(&format!("input{i}"), j, analytic.data()[j], numeric, self.floor);
            }
        }
        Ok(report)
    }
}

fn eval<F>(f: &F, store: &ParameterStore) -> Result<f64>
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<Var>,
{
    let mut g = Graph::new(Precision::F64);
    let out = f(&mut g, store)?;
    Ok(g.value(out).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let mut store = ParameterStore::new();
        let x = store.add("x", Tensor::scalar(3.0), Tag::Tuned).unwrap();
        let f = |g: &mut Graph, s: &ParameterStore| {
            let v = g.param(s, x);
            g.mul(v, v)
        };
        let mut g = Graph::default();
        let out = f(&mut g, &store).unwrap();
        let grads = g.backward(out).unwrap().param_grads();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
        let report = GradCheck::default().check_params(&mut store, f).unwrap();
        assert!(report.max_rel_err <= 1e-9, "{report:?}");
        assert_eq!(report.checked, 1);
    }

    #[test]
    fn frozen_inputs_are_ignored() {
        let mut store = ParameterStore::new();
        let a = store.add("a", Tensor::scalar(2.0), Tag::Tuned).unwrap();
        let b = store.add("b", Tensor::scalar(5.0), Tag::Frozen).unwrap();
        let report = GradCheck::default()
            .check_params(&mut store, |g, s| {
                let (va, vb) = (g.param(s, a), g.param(s, b));
                g.mul(va, vb)
            })
            .unwrap();
        assert_eq!(report.checked, 1);
        assert_eq!(report.worst.unwrap().0, "a");
        assert_eq!(store.value(b).item(), 5.0);
    }
}
