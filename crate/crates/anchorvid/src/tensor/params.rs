//! Named parameter storage, graph bindings and the finite-difference probe.

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Value};

/// All learnable parameters of a model, keyed by a stable path-like name,
/// plus one gradient accumulator of identical shape per parameter.
///
/// Iteration order is the sorted name order (`BTreeMap`), which keeps every
/// reduction over parameters deterministic.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter; its gradient accumulator starts at zero.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        self.grads.insert(name.clone(), Tensor::zeros(t.shape()));
        self.params.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    /// Replace an existing parameter's data (shape must match).
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let cur = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))?;
        if cur.shape() != t.shape() {
            return Err(Error::shape(
                "param_set",
                format!("{}: {:?} vs {:?}", name, cur.shape(), t.shape()),
            ));
        }
        *cur = t;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Fresh binding for one forward pass.
    pub fn binding(&self) -> ParamBinding<'_> {
        ParamBinding {
            store: self,
            leaves: RefCell::new(BTreeMap::new()),
        }
    }

    /// Add a set of named gradients into the accumulators.
    pub fn accumulate_grads(&mut self, named: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in named {
            let acc = self
                .grads
                .get_mut(name)
                .ok_or_else(|| Error::MissingParameter(name.clone()))?;
            *acc = acc.add(g)?;
        }
        Ok(())
    }

    /// Scale every accumulator, e.g. for batch averaging.
    pub fn scale_grads(&mut self, s: f64) -> Result<()> {
        for acc in self.grads.values_mut() {
            *acc = acc.scale(s)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for acc in self.grads.values_mut() {
            *acc = Tensor::zeros(acc.shape());
        }
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    /// Global L2 norm over all accumulators.
    pub fn grad_norm(&self) -> f64 {
        self.grads
            .values()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

}

/// Per-forward-pass memoizer that hands out one graph leaf per parameter, so
/// a parameter used in several places is a single node and its gradient
/// contributions accumulate.
pub struct ParamBinding<'a> {
    store: &'a ParamStore,
    leaves: RefCell<BTreeMap<String, Value>>,
}

impl ParamBinding<'_> {
    /// The graph leaf for a named parameter.
    pub fn value(&self, name: &str) -> Result<Value> {
        if let Some(v) = self.leaves.borrow().get(name) {
            return Ok(v.clone());
        }
        let t = self
            .store
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))?;
        let v = Value::param(name, t.clone());
        self.leaves.borrow_mut().insert(name.to_string(), v.clone());
        Ok(v)
    }
}

/// Central-difference gradient of `f` with respect to every parameter.
///
/// This is the slow, trustworthy oracle the analytic backward pass is tested
/// against: each coordinate is perturbed by ±eps and the loss re-evaluated.
pub fn finite_diff_grad(
    store: &ParamStore,
    eps: f64,
    f: impl Fn(&ParamStore) -> Result<f64>,
) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    let names: Vec<String> = store.names().cloned().collect();
    let mut work = store.clone();
    for name in names {
        let base = store.get(&name).expect("name from store").clone();
        let mut grad = vec![0.0; base.numel()];
        for i in 0..base.numel() {
            let orig = base.data()[i];

            let mut plus = base.data().to_vec();
            plus[i] = orig + eps;
            work.set(&name, Tensor::from_vec(base.shape().to_vec(), plus)?)?;
            let fp = f(&work)?;

            let mut minus = base.data().to_vec();
            minus[i] = orig - eps;
            work.set(&name, Tensor::from_vec(base.shape().to_vec(), minus)?)?;
            let fm = f(&work)?;

            grad[i] = (fp - fm) / (2.0 * eps);
        }
        work.set(&name, base.clone())?;
        out.insert(name, Tensor::from_vec(base.shape().to_vec(), grad)?);
    }
    Ok(out)
}
