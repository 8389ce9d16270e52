use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Named parameter tensors, kept in name order so iteration is stable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

/// Tape handles for one forward pass over a [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` was not bound"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.params.insert(name.into(), tensor.with_grad());
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Records every parameter on the tape. Only parameters accepted by
    /// `trainable` are differentiated; the rest enter as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let mut t = t.clone();
                let on = trainable(name);
                t.set_requires_grad(on);
                (name.clone(), tape.leaf(t))
            })
            .collect();
        Bound { vars }
    }

    /// Adds the tape gradients of every bound parameter into its grad buffer.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound) {
        for (name, var) in bound.iter() {
            if let (Some(g), Some(p)) = (tape.grad(var), self.params.get_mut(name)) {
                p.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Euclidean norm of all gradients accepted by `filter`.
    pub fn grad_norm(&self, filter: impl Fn(&str) -> bool) -> f64 {
        self.params
            .iter()
            .filter(|(k, _)| filter(k))
            .filter_map(|(_, t)| t.grad())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Stochastic gradient descent with heavy-ball momentum:
/// `v <- momentum * v + g; p <- p - lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Updates parameters accepted by `filter` in place and leaves every
    /// other parameter untouched. `grad_scale` multiplies gradients first.
    pub fn step(&mut self, store: &mut ParamStore, filter: impl Fn(&str) -> bool, grad_scale: f64) {
        for (name, p) in store.iter_mut() {
            if !filter(name) {
                continue;
            }
            let Some(g) = p.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; g.len()]);
            for ((vi, gi), pi) in v.iter_mut().zip(&g).zip(p.data_mut()) {
                *vi = self.momentum * *vi + grad_scale * gi;
                *pi -= self.lr * *vi;
            }
        }
    }

    /// Forgets accumulated velocity, e.g. between schedule stages.
    pub fn reset(&mut self) {
        self.velocity.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_applies_momentum() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(1.0));
        let mut opt = Sgd::new(0.1, 0.9);
        store.get_mut("w").unwrap().accumulate_grad(&[1.0]);
        opt.step(&mut store, |_| true, 1.0);
        assert!((store.get("w").unwrap().item() - 0.9).abs() < 1e-15);
        opt.step(&mut store, |_| true, 1.0);
        // v = 0.9 * 1 + 1 = 1.9
        assert!((store.get("w").unwrap().item() - 0.71).abs() < 1e-15);
    }

    #[test]
    fn filtered_params_are_untouched() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::scalar(1.0));
        store.insert("b", Tensor::scalar(1.0));
        for (_, p) in store.iter_mut() {
            p.accumulate_grad(&[1.0]);
        }
        Sgd::new(0.5, 0.0).step(&mut store, |n| n == "a", 1.0);
        assert_eq!(store.get("a").unwrap().item(), 0.5);
        assert_eq!(store.get("b").unwrap().item(), 1.0);
    }

    #[test]
    fn bind_respects_trainable_filter() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::scalar(2.0));
        store.insert("b", Tensor::scalar(3.0));
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |n| n == "a");
        let y = tape.mul(bound.get("a"), bound.get("b")).unwrap();
        tape.backward(y).unwrap();
        store.accumulate_grads(&tape, &bound);
        assert_eq!(store.get("a").unwrap().grad().unwrap(), &[3.0]);
        assert_eq!(store.get("b").unwrap().grad().unwrap(), &[0.0]);
    }
}
