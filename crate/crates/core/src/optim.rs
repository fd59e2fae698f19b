//! Decoupled-weight-decay Adam and a parameter EMA, both keyed by parameter
//! name so they line up with a [`ParamStore`].

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moments of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub step: u64,
    pub moments: IndexMap<String, Moments>,
}

impl OptimState {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let moments = store
            .trainable()
            .map(|(name, t)| {
                (
                    name.to_string(),
                    Moments {
                        m: vec![0.0; t.len()],
                        v: vec![0.0; t.len()],
                    },
                )
            })
            .collect();
        OptimState {
            config,
            step: 0,
            moments,
        }
    }

    /// One bias-corrected AdamW update of every trainable parameter:
    /// `p ← p − lr·(m̂/(√v̂ + ε) + wd·p)`.
    ///
    /// All gradients are checked before anything is modified; a non-finite
    /// gradient rejects the whole step.
    pub fn step(&mut self, store: &mut ParamStore, grads: &IndexMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, p) in store.trainable() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::contract(format!("missing gradient for `{name}`")))?;
            if g.shape() != p.shape() {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::NumericOverflow { op: "adamw gradient" });
            }
            if !self.moments.contains_key(name) {
                return Err(Error::contract(format!("no optimizer moments for `{name}`")));
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, p) in store.trainable_mut() {
            let g = grads[name].data();
            let mom = self.moments.get_mut(name).expect("checked above");
            for (((pv, &gv), m), v) in p.data_mut().iter_mut().zip(g).zip(&mut mom.m).zip(&mut mom.v) {
                let gv = gv as f64;
                *m = beta1 * *m + (1.0 - beta1) * gv;
                *v = beta2 * *v + (1.0 - beta2) * gv * gv;
                let update = (*m / c1) / ((*v / c2).sqrt() + eps) + weight_decay * *pv as f64;
                *pv = (*pv as f64 - lr * update) as f32;
            }
        }
        Ok(())
    }
}

/// Shadow parameters updated as `s ← d·s + (1−d)·p` with
/// `d = min(decay_max, (1+step)/(10+step))`, or `d = decay_max` with the
/// warmup ramp disabled.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub decay_max: f64,
    pub warmup: bool,
    pub shadow: IndexMap<String, Tensor>,
}

impl EmaState {
    pub fn new(store: &ParamStore, decay_max: f64) -> Self {
        EmaState {
            decay_max,
            warmup: true,
            shadow: store.trainable().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    pub fn decay(&self, step: u64) -> f64 {
        if !self.warmup {
            return self.decay_max;
        }
        let ramp = (1.0 + step as f64) / (10.0 + step as f64);
        ramp.min(self.decay_max)
    }

    pub fn update(&mut self, store: &ParamStore, step: u64) -> Result<()> {
        let d = self.decay(step);
        for (name, p) in store.trainable() {
            let s = self
                .shadow
                .get_mut(name)
                .ok_or_else(|| Error::contract(format!("no EMA shadow for `{name}`")))?;
            if s.shape() != p.shape() {
                return Err(Error::shape("ema", s.shape(), p.shape()));
            }
            for (sv, &pv) in s.data_mut().iter_mut().zip(p.data()) {
                *sv = (d * *sv as f64 + (1.0 - d) * pv as f64) as f32;
            }
        }
        Ok(())
    }

    /// Copy of `store` with trainable entries replaced by their shadows;
    /// buffers are kept from `store`.
    pub fn apply_to(&self, store: &ParamStore) -> Result<ParamStore> {
        let mut out = store.clone();
        for (name, s) in &self.shadow {
            out.set(name, s.clone())?;
        }
        Ok(out)
    }
}
