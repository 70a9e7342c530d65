//! Adaptive-moment optimizer over the trainable set of an adapted model.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{AdaptedModel, ParamRef};
use crate::model::Gradients;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    /// Coupled L2 decay added to the gradient.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::config(
                "learning rate must be positive, decay non-negative",
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0,1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    moments: BTreeMap<ParamRef, (Array2<f64>, Array2<f64>)>,
}

fn slot<'a>(model: &'a mut AdaptedModel, r: &ParamRef) -> Option<&'a mut Array2<f64>> {
    match r {
        ParamRef::Base(n) => model.base.params_mut().get_mut(n),
        ParamRef::AdapterA(n) => model.adapters.get_mut(n).map(|a| &mut a.a),
        ParamRef::AdapterB(n) => model.adapters.get_mut(n).map(|a| &mut a.b),
    }
}

fn grad<'a>(grads: &'a Gradients, r: &ParamRef) -> Option<&'a Array2<f64>> {
    match r {
        ParamRef::Base(n) => grads.params.get(n),
        ParamRef::AdapterA(n) => grads.adapters.get(n).map(|g| &g.0),
        ParamRef::AdapterB(n) => grads.adapters.get(n).map(|g| &g.1),
    }
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every tensor in `model.trainable_parameters()`.
    /// Tensors outside that set are never written.
    pub fn step(&mut self, model: &mut AdaptedModel, grads: &Gradients) {
        let refs = model.trainable_parameters();
        self.step_refs(model, &refs, grads);
    }

    /// One update restricted to `refs`.
    pub fn step_refs(&mut self, model: &mut AdaptedModel, refs: &[ParamRef], grads: &Gradients) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for r in refs {
            let Some(g) = grad(grads, r).cloned() else {
                continue;
            };
            let Some(w) = slot(model, r) else { continue };
            let g = g + &(&*w * c.weight_decay);
            let (m, v) = self
                .moments
                .entry(r.clone())
                .or_insert_with(|| (Array2::zeros(g.dim()), Array2::zeros(g.dim())));
            m.zip_mut_with(&g, |m, &g| *m = c.beta1 * *m + (1.0 - c.beta1) * g);
            v.zip_mut_with(&g, |v, &g| *v = c.beta2 * *v + (1.0 - c.beta2) * g * g);
            ndarray::Zip::from(w).and(&*m).and(&*v).for_each(|w, &m, &v| {
                *w -= c.learning_rate * (m / bc1) / ((v / bc2).sqrt() + c.eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::inject;
    use crate::model::ToyModel;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let base = ToyModel::build(0, 8).unwrap();
        let targets = base.default_lora_targets();
        let mut m = inject(base, &targets, 2, 0).unwrap();
        let mut g = Gradients::zeros(&m.base, &m.adapters);
        g.adapters.values_mut().for_each(|(_, db)| db.fill(3.0));
        let before = m.base.params().checksum();
        let mut opt = Adam::new(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        })
        .unwrap();
        opt.step(&mut m, &g);
        assert_eq!(m.base.params().checksum(), before);
        for a in m.adapters.values() {
            assert!(a.b.iter().all(|&b| (b + 1e-4).abs() < 1e-9));
        }
    }
}
