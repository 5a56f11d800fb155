//! Trainable parameters, gradient buffers and the Adam optimizer.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub adam_m: Tensor,
    pub adam_v: Tensor,
    pub step_count: u64,
}

impl Parameter {
    fn new(name: String, value: Tensor) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Parameter {
            name,
            grad: zeros.clone(),
            adam_m: zeros.clone(),
            adam_v: zeros,
            value,
            step_count: 0,
        }
    }
}

/// Ordered, named collection of parameters. Registration order is the
/// checkpoint order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(Error::contract(alloc::format!("duplicate parameter `{name}`")));
        }
        self.params.push(Parameter::new(name, value));
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Adds `grads` into the per-parameter gradient accumulators.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (p, g) in self.params.iter_mut().zip(&grads.grads) {
            if let Some(g) = g {
                for (acc, v) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *acc += v;
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        libm::sqrt(
            self.params
                .iter()
                .flat_map(|p| p.grad.data())
                .map(|g| g * g)
                .sum(),
        )
    }

    /// Rescales accumulated gradients so their global L2 norm is at most
    /// `max_norm`. Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm.is_finite() && norm > max_norm {
            let scale = max_norm / norm;
            for p in &mut self.params {
                for g in p.grad.data_mut() {
                    *g *= scale;
                }
            }
        }
        norm
    }
}

/// Gradients produced by one backward pass, indexed like the store.
/// `None` means the parameter was unreachable from the loss (zero gradient).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub(crate) grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn empty(num_params: usize) -> Self {
        Gradients {
            grads: (0..num_params).map(|_| None).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of `id`, zero-filled when unreachable.
    pub fn dense(&self, store: &ParamStore, id: ParamId) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()))
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine.as_mut(), theirs) {
                (_, None) => {}
                (None, Some(t)) => *mine = Some(t.clone()),
                (Some(m), Some(t)) => {
                    for (a, b) in m.data_mut().iter_mut().zip(t.data()) {
                        *a += b;
                    }
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update over every parameter using its accumulated gradient,
/// then clears the gradients. Any non-finite gradient aborts before a single
/// value is touched.
pub fn adam_step(store: &mut ParamStore, learning_rate: f64) -> Result<()> {
    adam_step_with(store, learning_rate, AdamConfig::default())
}

pub fn adam_step_with(store: &mut ParamStore, learning_rate: f64, cfg: AdamConfig) -> Result<()> {
    for p in &store.params {
        if !p.grad.is_finite() {
            let norm = libm::sqrt(p.grad.data().iter().map(|g| g * g).sum());
            return Err(Error::NonFiniteGradient {
                name: p.name.to_string(),
                norm,
            });
        }
    }
    for p in &mut store.params {
        p.step_count += 1;
        let t = p.step_count as f64;
        let bias1 = 1.0 - libm::pow(cfg.beta1, t);
        let bias2 = 1.0 - libm::pow(cfg.beta2, t);
        let g = p.grad.data();
        let m = p.adam_m.data_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        }
        let v = p.adam_v.data_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        }
        let (m, v) = (p.adam_m.data(), p.adam_v.data());
        for ((w, mi), vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
            let m_hat = mi / bias1;
            let v_hat = vi / bias2;
            *w -= learning_rate * m_hat / (libm::sqrt(v_hat) + cfg.eps);
        }
        p.grad.data_mut().fill(0.0);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn single(value: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::scalar(value)).unwrap();
        (store, id)
    }

    #[test]
    fn zero_gradient_leaves_value() {
        let (mut store, id) = single(0.7);
        adam_step(&mut store, 0.001).unwrap();
        assert_eq!(store.value(id).data(), &[0.7]);
        assert_eq!(store.get(id).step_count, 1);
    }

    #[test]
    fn one_step_descends_quadratic() {
        let (mut store, id) = single(1.0);
        store.get_mut(id).grad = Tensor::scalar(2.0);
        adam_step(&mut store, 0.001).unwrap();
        let w = store.value(id).data()[0];
        assert!(w < 1.0 && w > 0.0);
        assert_eq!(store.get(id).grad.data(), &[0.0]);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        let (mut store, id) = single(1.0);
        for _ in 0..200 {
            let w = store.value(id).data()[0];
            store.get_mut(id).grad = Tensor::scalar(2.0 * w);
            adam_step(&mut store, 0.05).unwrap();
        }
        assert!(store.value(id).data()[0].abs() < 1e-2);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut store = ParamStore::new();
        store.register("fine", Tensor::scalar(1.0)).unwrap();
        let bad = store.register("bad", Tensor::vector(vec![1.0, 2.0])).unwrap();
        store.get_mut(bad).grad = Tensor::vector(vec![0.0, f64::NAN]);
        match adam_step(&mut store, 0.1) {
            Err(Error::NonFiniteGradient { name, .. }) => assert_eq!(name, "bad"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(store.value(bad).data(), &[1.0, 2.0]);
    }

    #[test]
    fn clipping_bounds_norm() {
        let (mut store, id) = single(0.0);
        store.get_mut(id).grad = Tensor::scalar(-10.0);
        assert_eq!(store.clip_grad_norm(5.0), 10.0);
        assert_eq!(store.get(id).grad.data(), &[-5.0]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let (mut store, _) = single(0.0);
        assert!(store.register("w", Tensor::scalar(1.0)).is_err());
    }
}
