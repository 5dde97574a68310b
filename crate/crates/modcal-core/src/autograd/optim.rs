//! Named parameter tensors and the two optimizers used in this crate: Adam for model
//! training and plain fixed-step gradient descent for input-space inversion.

use std::collections::HashMap;
use std::sync::Arc;

use indexmap::IndexMap;
use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use super::{Grads, Graph, Var};

/// Ordered, named parameter tensors. Order is insertion order and is part of the
/// checkpoint format, so construction must be deterministic.
#[derive(Clone, Default)]
pub struct ParamSet {
    entries: IndexMap<String, Arc<ArrayD<f64>>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        let name = name.into();
        assert!(
            self.entries.insert(name.clone(), Arc::new(value)).is_none(),
            "duplicate parameter name {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Arc<ArrayD<f64>> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn set(&mut self, name: &str, value: ArrayD<f64>) {
        let slot = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        *slot = Arc::new(value);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<ArrayD<f64>>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|v| v.len()).sum()
    }

    /// Bind every parameter into a graph; returns the name -> Var binding used to pull
    /// gradients back out after `backward`.
    pub fn bind(&self, g: &Graph) -> HashMap<String, Var> {
        self.entries
            .iter()
            .map(|(name, value)| (name.clone(), g.leaf_shared(Arc::clone(value))))
            .collect()
    }

    /// SHA-256 over names, shapes, and exact little-endian payload bytes.
    pub fn checksum(&self) -> String {
        self.checksum_filtered(|_| true)
    }

    /// Checksum restricted to parameters whose name starts with `prefix`.
    pub fn checksum_prefix(&self, prefix: &str) -> String {
        self.checksum_filtered(|n| n.starts_with(prefix))
    }

    fn checksum_filtered(&self, keep: impl Fn(&str) -> bool) -> String {
        let mut hasher = Sha256::new();
        for (name, value) in &self.entries {
            if !keep(name) {
                continue;
            }
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for &d in value.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for &x in value.iter() {
                hasher.update(x.to_le_bytes());
            }
        }
        format!("{:x}", hasher.finalize())
    }
}

/// He-normal initialization for a leaky-ReLU conv/linear stack.
pub fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(ndarray::IxDyn(shape))
}

/// Adam with per-parameter step counts, so a parameter group unfrozen mid-run gets
/// fresh bias correction instead of a stale global step.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: HashMap<String, AdamState>,
}

struct AdamState {
    m: ArrayD<f64>,
    v: ArrayD<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, state: HashMap::new() }
    }

    /// Apply one update to every parameter that has a gradient and passes `trainable`.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        bindings: &HashMap<String, Var>,
        grads: &mut Grads,
        trainable: impl Fn(&str) -> bool,
    ) {
        // Iterate in ParamSet order for bit-deterministic state evolution.
        let names: Vec<String> = params.names().map(str::to_owned).collect();
        for name in names {
            if !trainable(&name) {
                continue;
            }
            let Some(var) = bindings.get(&name) else { continue };
            let Some(grad) = grads.take(*var) else { continue };
            let slot = params.entries.get_mut(&name).unwrap();
            let st = self.state.entry(name.clone()).or_insert_with(|| AdamState {
                m: ArrayD::zeros(grad.raw_dim()),
                v: ArrayD::zeros(grad.raw_dim()),
                t: 0,
            });
            st.t += 1;
            let (b1, b2) = (self.beta1, self.beta2);
            ndarray::Zip::from(&mut st.m).and(&grad).for_each(|m, &g| *m = b1 * *m + (1.0 - b1) * g);
            ndarray::Zip::from(&mut st.v).and(&grad).for_each(|v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let bc1 = 1.0 - b1.powi(st.t as i32);
            let bc2 = 1.0 - b2.powi(st.t as i32);
            let lr = self.lr;
            let eps = self.eps;
            let value = Arc::make_mut(slot);
            ndarray::Zip::from(value).and(&st.m).and(&st.v).for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        }
    }
}

/// Plain gradient descent with a fixed step size; used for image-wise optimization.
pub struct GradientDescent {
    pub step_size: f64,
}

impl GradientDescent {
    pub fn apply(&self, value: &mut ArrayD<f64>, grad: &ArrayD<f64>) {
        ndarray::Zip::from(value).and(grad).for_each(|p, &g| *p -= self.step_size * g);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;

    #[test]
    fn adam_descends_a_quadratic() {
        let mut params = ParamSet::new();
        params.insert("x", ArrayD::from_elem(ndarray::IxDyn(&[2]), 3.0));
        let mut opt = Adam::new(0.1);
        for _ in 0..200 {
            let g = Graph::new();
            let bind = params.bind(&g);
            let x = bind["x"];
            let loss = g.sum_all(g.square(x));
            let mut grads = g.backward(loss);
            opt.step(&mut params, &bind, &mut grads, |_| true);
        }
        for &v in params.get("x").iter() {
            assert!(v.abs() < 0.05, "Adam failed to descend: {v}");
        }
    }

    #[test]
    fn checksum_changes_with_values() {
        let mut a = ParamSet::new();
        a.insert("w", ArrayD::from_elem(ndarray::IxDyn(&[3]), 1.0));
        let c1 = a.checksum();
        a.set("w", ArrayD::from_elem(ndarray::IxDyn(&[3]), 1.0 + 1e-15));
        assert_ne!(c1, a.checksum());
    }

    #[test]
    fn frozen_groups_are_untouched() {
        let mut params = ParamSet::new();
        params.insert("c.w", ArrayD::from_elem(ndarray::IxDyn(&[2]), 2.0));
        params.insert("s.w", ArrayD::from_elem(ndarray::IxDyn(&[2]), 2.0));
        let before = params.get("s.w").clone();
        let mut opt = Adam::new(0.1);
        let g = Graph::new();
        let bind = params.bind(&g);
        let loss = g.sum_all(g.square(g.add(bind["c.w"], bind["s.w"])));
        let mut grads = g.backward(loss);
        opt.step(&mut params, &bind, &mut grads, |n| n.starts_with("c."));
        assert_eq!(*before, **params.get("s.w"));
        assert_ne!(*before, **params.get("c.w"));
    }
}
