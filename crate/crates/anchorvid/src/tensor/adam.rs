//! Adam optimizer with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay: applied directly to the weights, not through the
    /// moment estimates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// First/second-moment state per parameter plus the shared step counter.
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Apply one update from the store's gradient accumulators, then zero
    /// them. Returns the global gradient norm before the update.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<f64> {
        let norm = store.grad_norm();
        if !norm.is_finite() {
            return Err(Error::NonFinite { op: "adam_step" });
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);

        let names: Vec<String> = store.names().cloned().collect();
        for name in names {
            let g = store
                .grad(&name)
                .expect("accumulator exists for every param")
                .clone();
            let p = store.get(&name).expect("param exists").clone();
            let n = p.numel();

            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);

            let mut fresh = p.data().to_vec();
            let gd = g.data();
            for i in 0..n {
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * gd[i];
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * gd[i] * gd[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                fresh[i] -= self.cfg.lr * (mh / (vh.sqrt() + self.cfg.eps)
                    + self.cfg.weight_decay * fresh[i]);
            }
            store.set(
                &name,
                Tensor::from_vec(p.shape().to_vec(), fresh)?.check_finite("adam_step")?,
            )?;
        }
        store.zero_grads();
        Ok(norm)
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_store(x: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::from_vec(vec![x.len()], x.to_vec()).unwrap());
        s
    }

    #[test]
    fn first_step_moves_against_gradient_by_lr() {
        // With bias correction, the very first Adam step is ~lr * sign(g).
        let mut store = quadratic_store(&[1.0, -2.0]);
        let mut grads = BTreeMap::new();
        grads.insert(
            "x".to_string(),
            Tensor::from_vec(vec![2], vec![0.5, -0.5]).unwrap(),
        );
        store.accumulate_grads(&grads).unwrap();
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        opt.step(&mut store).unwrap();
        let x = store.get("x").unwrap().data().to_vec();
        assert!((x[0] - (1.0 - 0.1)).abs() < 1e-6);
        assert!((x[1] - (-2.0 + 0.1)).abs() < 1e-6);
        // Accumulators were consumed.
        assert_eq!(store.grad("x").unwrap().data(), &[0.0, 0.0]);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn decay_is_decoupled() {
        // Zero gradient, nonzero decay: the weight still shrinks toward 0.
        let mut store = quadratic_store(&[1.0]);
        let mut opt = Adam::new(AdamConfig {
            lr: 0.5,
            weight_decay: 0.1,
            ..AdamConfig::default()
        });
        opt.step(&mut store).unwrap();
        let x = store.get("x").unwrap().data()[0];
        assert!((x - (1.0 - 0.5 * 0.1 * 1.0)).abs() < 1e-9);
    }

    #[test]
    fn optimizes_a_quadratic() {
        // Minimize sum((x - target)^2) by feeding analytic gradients.
        let target = [0.3, -0.7, 1.1];
        let mut store = quadratic_store(&[5.0, 5.0, 5.0]);
        let mut opt = Adam::new(AdamConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        for _ in 0..800 {
            let x = store.get("x").unwrap().clone();
            let g: Vec<f64> = x
                .data()
                .iter()
                .zip(target.iter())
                .map(|(xi, ti)| 2.0 * (xi - ti))
                .collect();
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), Tensor::from_vec(vec![3], g).unwrap());
            store.accumulate_grads(&grads).unwrap();
            opt.step(&mut store).unwrap();
        }
        // Constant-lr Adam hovers near the optimum rather than landing on it.
        let x = store.get("x").unwrap().data();
        for (xi, ti) in x.iter().zip(target.iter()) {
            assert!((xi - ti).abs() < 5e-3, "{} vs {}", xi, ti);
        }
    }
}
