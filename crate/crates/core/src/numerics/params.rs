use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Training partition of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tag {
    Frozen,
    Tuned,
}

impl Tag {
    pub fn code(self) -> u8 {
        match self {
            Tag::Frozen => 0,
            Tag::Tuned => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<Tag> {
        match c {
            0 => Ok(Tag::Frozen),
            1 => Ok(Tag::Tuned),
            _ => Err(Error::Format(format!("unknown parameter tag {c}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    name: String,
    tag: Tag,
    value: Tensor,
    moments: Option<Moments>,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn tag(&self) -> Tag {
        self.tag
    }
    pub fn value(&self) -> &Tensor {
        &self.value
    }
    pub fn has_optimizer_state(&self) -> bool {
        self.moments.is_some()
    }

    pub(crate) fn moments_raw(&self) -> Option<(u64, &[f64], &[f64])> {
        self.moments.as_ref().map(|m| (m.step, &m.m[..], &m.v[..]))
    }
}

/// Named parameters with a total FROZEN/TUNED partition.
///
/// Optimizer moments are allocated when a parameter becomes TUNED and dropped
/// when it is frozen, so state only ever exists for the tuned set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor, tag: Tag) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let moments = (tag == Tag::Tuned).then(|| Moments::zeros(value.numel()));
        self.params.push(Parameter {
            name: name.to_string(),
            tag,
            value,
            moments,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Adds a parameter drawn from N(0, std²).
    pub fn add_normal<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        tag: Tag,
        rng: &mut R,
    ) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = if std == 0.0 {
            vec![0.0; n]
        } else {
            let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
            (0..n).map(|_| dist.sample(rng)).collect()
        };
        self.add(name, Tensor::new(shape.to_vec(), data)?, tag)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn param(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn tag(&self, id: ParamId) -> Tag {
        self.params[id.0].tag
    }

    pub fn set_tag(&mut self, id: ParamId, tag: Tag) {
        let p = &mut self.params[id.0];
        if p.tag == tag {
            return;
        }
        p.tag = tag;
        p.moments = match tag {
            Tag::Tuned => Some(Moments::zeros(p.value.numel())),
            Tag::Frozen => None,
        };
    }

    pub(crate) fn restore_moments(&mut self, id: ParamId, step: u64, m: Vec<f64>, v: Vec<f64>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.tag != Tag::Tuned {
            return Err(Error::Format(format!("optimizer state for frozen parameter {}", p.name)));
        }
        p.moments = Some(Moments { m, v, step });
        Ok(())
    }

    /// Retags every parameter whose name starts with `prefix`; returns the count.
    pub fn set_tag_prefix(&mut self, prefix: &str, tag: Tag) -> usize {
        let ids: Vec<ParamId> = self
            .by_name
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(_, id)| *id)
            .collect();
        for &id in &ids {
            self.set_tag(id, tag);
        }
        ids.len()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn scalar_count(&self, tag: Option<Tag>) -> usize {
        self.params
            .iter()
            .filter(|p| tag.is_none_or(|t| p.tag == t))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Fraction of scalars in the TUNED partition.
    pub fn tuned_fraction(&self) -> f64 {
        let total = self.scalar_count(None);
        if total == 0 {
            return 0.0;
        }
        self.scalar_count(Some(Tag::Tuned)) as f64 / total as f64
    }

    /// Copies values of every parameter present in `other` under the same name
    /// and shape. Returns how many were copied.
    pub fn load_values_from(&mut self, other: &ParameterStore) -> Result<usize> {
        let mut copied = 0;
        for p in &mut self.params {
            if let Some(&oid) = other.by_name.get(&p.name) {
                let src = &other.params[oid.0].value;
                if src.shape() != p.value.shape() {
                    return Err(Error::shape("load_values_from", p.value.shape(), src.shape()));
                }
                p.value = src.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }
}

impl Moments {
    fn zeros(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// Gradients keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Grads {
    slots: BTreeMap<ParamId, Tensor>,
}

impl Grads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, g: Tensor) {
        self.slots.insert(id, g);
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        match self.slots.get_mut(&id) {
            Some(t) => t.add_assign(g),
            None => {
                self.slots.insert(id, g.clone());
            }
        }
    }

    pub fn merge(&mut self, other: &Grads) {
        for (id, g) in &other.slots {
            self.accumulate(*id, g);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.slots.values_mut() {
            g.scale_assign(c);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slots.values().map(|g| g.sq_norm()).sum::<f64>().sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`; returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm.is_finite() && norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.slots.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamW {
    /// One decoupled-weight-decay Adam update over the TUNED partition.
    ///
    /// FROZEN parameters are never read for update, whatever `grads` holds.
    pub fn step(&self, store: &mut ParameterStore, grads: &Grads) -> Result<()> {
        for p in &store.params {
            if p.tag != Tag::Tuned {
                continue;
            }
            let id = store.by_name[&p.name];
            let g = grads.get(id).ok_or_else(|| {
                Error::Numeric(format!("missing gradient for tuned parameter {}", p.name))
            })?;
            if g.numel() != p.value.numel() {
                return Err(Error::shape("adamw_step", p.value.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter {}",
                    p.name
                )));
            }
        }
        for (i, p) in store.params.iter_mut().enumerate() {
            if p.tag != Tag::Tuned {
                continue;
            }
            let g = grads.get(ParamId(i)).expect("checked above");
            let mom = p.moments.as_mut().expect("tuned parameters carry moments");
            mom.step += 1;
            let bc1 = 1.0 - self.beta1.powi(mom.step as i32);
            let bc2 = 1.0 - self.beta2.powi(mom.step as i32);
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                mom.m[j] = self.beta1 * mom.m[j] + (1.0 - self.beta1) * gj;
                mom.v[j] = self.beta2 * mom.v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = mom.m[j] / bc1;
                let v_hat = mom.v[j] / bc2;
                *w *= 1.0 - self.lr * self.weight_decay;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
