use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Named parameters plus Adam state. Ordered by name so iteration (and
/// therefore every update and serialization) is deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F: Scalar = f32> {
    params: BTreeMap<String, Tensor<F>>,
    moments: BTreeMap<String, Moments>,
    step: u64,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
            moments: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<F>) {
        self.moments.remove(name);
        self.params.insert(name.to_owned(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::ModelFormat(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::ModelFormat(format!("missing parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Parameter values in another precision; optimizer state is dropped.
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            moments: BTreeMap::new(),
            step: 0,
        }
    }

    /// One bias-corrected Adam update over every parameter that has a gradient.
    pub fn adam_step(&mut self, grads: &Grads<F>, cfg: &AdamConfig) -> Result<()> {
        for (name, g) in &grads.0 {
            if !g.all_finite() {
                return Err(Error::Divergence {
                    step: self.step,
                    what: format!("gradient of {name}"),
                });
            }
            let p = self.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("{name}: param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (name, g) in &grads.0 {
            let p = self.params.get_mut(name).expect("checked above");
            let m = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                first: vec![0.0; g.len()],
                second: vec![0.0; g.len()],
            });
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.first.iter_mut())
                .zip(m.second.iter_mut())
            {
                let gv = gv.widen();
                *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
                *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv = F::narrow(pv.widen() - cfg.lr * mhat / (vhat.sqrt() + cfg.eps));
            }
        }
        Ok(())
    }
}

/// Gradients keyed like the [`ParamStore`] they belong to.
#[derive(Clone, Debug, Default)]
pub struct Grads<F: Scalar = f32>(pub BTreeMap<String, Tensor<F>>);

impl<F: Scalar> Grads<F> {
    pub fn new() -> Self {
        Grads(BTreeMap::new())
    }

    pub fn accumulate(&mut self, name: &str, g: &Tensor<F>) -> Result<()> {
        match self.0.get_mut(name) {
            Some(acc) => {
                if acc.shape() != g.shape() {
                    return Err(Error::shape("grads", format!("{name}")));
                }
                for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = F::narrow(a.widen() + v.widen());
                }
            }
            None => {
                self.0.insert(name.to_owned(), g.clone());
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.0.get(name)
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.0.values_mut() {
            for v in g.data_mut() {
                *v = F::narrow(v.widen() * factor);
            }
        }
    }
}
