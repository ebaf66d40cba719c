//! Named trainable arrays, their gradients, and the optimizer.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, SableError};
use crate::tensor::{Gradients, Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        ParamId(i)
    }
}

/// Flat, ordered collection of named parameter arrays.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    grads: Vec<Tensor>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(SableError::contract(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.names.len());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(Arc::new(value));
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.values[id.0])
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    /// Adds the gradients of every parameter bound on `graph`. Repeated
    /// calls accumulate until [`ParamStore::zero_grad`].
    pub fn accumulate(&mut self, graph: &Graph, grads: &Gradients) -> Result<()> {
        for (id, var) in graph.bound_params() {
            if id.0 >= self.len() {
                return Err(SableError::contract("graph bound a foreign parameter id"));
            }
            if let Some(g) = grads.wrt(var) {
                self.grads[id.0].add_assign(g)?;
            }
        }
        Ok(())
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads
            .iter()
            .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for g in &mut self.grads {
                for x in g.data_mut() {
                    *x *= s;
                }
            }
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Checks that `other` holds the same names and shapes, in any order.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for id in self.ids() {
            let name = self.name(id);
            let Some(oid) = other.id(name) else {
                return Err(SableError::ParamMismatch {
                    name: name.to_string(),
                    detail: "missing from checkpoint".into(),
                });
            };
            if other.value(oid).shape() != self.value(id).shape() {
                return Err(SableError::ParamMismatch {
                    name: name.to_string(),
                    detail: format!(
                        "shape {:?} in checkpoint, model expects {:?}",
                        other.value(oid).shape(),
                        self.value(id).shape()
                    ),
                });
            }
        }
        if let Some(extra) = other.ids().map(|i| other.name(i)).find(|n| self.id(n).is_none()) {
            return Err(SableError::ParamMismatch {
                name: extra.to_string(),
                detail: "not part of this model".into(),
            });
        }
        Ok(())
    }

    /// Copies values from a compatible store.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        self.check_compatible(other)?;
        for id in self.ids() {
            let oid = other.id(self.name(id)).expect("checked");
            self.values[id.0] = Arc::new(other.value(oid).clone());
        }
        Ok(())
    }
}

pub fn normal_init(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Adaptive moment estimation.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.ids().map(|i| Tensor::zeros(store.value(i).shape())).collect(),
            v: store.ids().map(|i| Tensor::zeros(store.value(i).shape())).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let g = store.grads[id.0].data().to_vec();
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let w = Arc::make_mut(&mut store.values[id.0]).data_mut();
            for k in 0..g.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                w[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulate_sums_repeated_backward_calls() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::row(vec![1.0, 2.0])).unwrap();
        for _ in 0..2 {
            let mut g = Graph::new();
            let wv = g.param(&store, w);
            let s = g.sum(wv);
            let grads = g.backward(s).unwrap();
            store.accumulate(&g, &grads).unwrap();
        }
        assert_eq!(store.grad(w).data(), &[2.0, 2.0]);
        store.zero_grad();
        assert_eq!(store.grad(w).data(), &[0.0, 0.0]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::zeros(&[1, 1])).unwrap();
        assert!(store.add("a", Tensor::zeros(&[1, 1])).is_err());
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::row(vec![0.0, 0.0])).unwrap();
        store.grads[w.0] = Tensor::row(vec![3.0, 4.0]);
        assert_eq!(store.clip_grad_norm(1.0), 5.0);
        assert!((store.grad_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::row(vec![3.0, -2.0])).unwrap();
        let mut opt = Adam::new(&store, 0.1);
        for _ in 0..300 {
            store.zero_grad();
            let mut g = Graph::new();
            let wv = g.param(&store, w);
            let sq = g.square(wv);
            let s = g.sum(sq);
            let grads = g.backward(s).unwrap();
            store.accumulate(&g, &grads).unwrap();
            opt.step(&mut store);
        }
        assert!(store.value(w).max_abs() < 1e-2);
    }
}
