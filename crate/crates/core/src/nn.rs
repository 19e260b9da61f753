//! Named parameter storage, layer building blocks and the Adam optimizer.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters keyed by `module.parameter` path.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(!self.params.contains_key(&name), "parameter `{name}` registered twice");
        self.params.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Merge another store's entries into this one.
    pub fn extend(&mut self, other: ParamStore) {
        for (k, v) in other.params {
            self.insert(k, v);
        }
    }

    /// Replace values from `other`, requiring identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, value) in &self.params {
            let incoming = other.params.get(name).ok_or_else(|| Error::CheckpointParam {
                name: name.clone(),
                message: "missing from archive".into(),
            })?;
            if incoming.shape() != value.shape() {
                return Err(Error::CheckpointParam {
                    name: name.clone(),
                    message: format!("shape {:?} in archive, model expects {:?}", incoming.shape(), value.shape()),
                });
            }
        }
        if let Some(extra) = other.params.keys().find(|k| !self.params.contains_key(*k)) {
            return Err(Error::CheckpointParam {
                name: extra.clone(),
                message: "not a parameter of this model".into(),
            });
        }
        self.params = other.params.clone();
        Ok(())
    }

    /// Wrap every parameter in a graph leaf for one forward pass.
    pub fn bind(&self, trainable: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), Var::leaf(v.clone(), trainable)))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }
}

/// Graph leaves for a [`ParamStore`], valid for one forward/backward pass.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named `{name}`"))
    }

    /// Substitute the leaf for one parameter, e.g. to probe it externally.
    pub fn with(mut self, name: &str, var: Var) -> Self {
        let slot = self.vars.get_mut(name).unwrap_or_else(|| panic!("no parameter named `{name}`"));
        assert_eq!(slot.shape(), var.shape(), "shape of `{name}`");
        *slot = var;
        self
    }

    /// Gradients accumulated so far; parameters untouched by the loss get zeros.
    pub fn grads(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.grad().unwrap_or_else(|| Tensor::zeros(v.shape()))))
            .collect()
    }
}

/// Seeded parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        Tensor::from_fn(shape, |_| self.rng.random_range(-bound..=bound))
    }

    /// Uniform with variance `1 / fan_in`.
    pub fn fan_in(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        self.uniform(shape, (3.0 / fan_in as f64).sqrt())
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: String,
    bias: String,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, input: usize, output: usize) -> Self {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.insert(&weight, init.fan_in(&[input, output], input));
        store.insert(&bias, Tensor::zeros(&[output]));
        Self { weight, bias }
    }

    /// `[n, input] -> [n, output]`.
    pub fn forward(&self, p: &Bound, x: &Var) -> Var {
        x.matmul(p.var(&self.weight)).add_row_bias(p.var(&self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: String,
    bias: String,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.insert(&weight, init.fan_in(&[output, input, kernel, kernel], input * kernel * kernel));
        store.insert(&bias, Tensor::zeros(&[output]));
        Self { weight, bias, stride, pad }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Var {
        x.conv2d(p.var(&self.weight), Some(p.var(&self.bias)), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    weight: String,
    bias: String,
    stride: usize,
    pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        // Each output pixel sees about input * (k / stride)^2 taps.
        let fan = (input * kernel * kernel / (stride * stride)).max(1);
        store.insert(&weight, init.fan_in(&[input, output, kernel, kernel], fan));
        store.insert(&bias, Tensor::zeros(&[output]));
        Self { weight, bias, stride, pad }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Var {
        x.conv_transpose2d(p.var(&self.weight), Some(p.var(&self.bias)), self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub step: u64,
    pub first_moment: ParamStore,
    pub second_moment: ParamStore,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = ParamStore {
            params: params.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect(),
        };
        Self {
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn update(&mut self, cfg: &AdamConfig, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - cfg.beta1.powi(t);
        let bias2 = 1.0 - cfg.beta2.powi(t);
        for (name, value) in params.params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.first_moment.params.get_mut(name).expect("optimizer state out of sync");
            let v = self.second_moment.params.get_mut(name).expect("optimizer state out of sync");
            for (((p, g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *p -= cfg.lr * (*m / bias1) / ((*v / bias2).sqrt() + cfg.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::new(vec![2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(&store);
        let cfg = AdamConfig { lr: 0.05, ..Default::default() };
        for _ in 0..500 {
            let b = store.bind(true);
            b.var("x").square().sum().backward();
            opt.update(&cfg, &mut store, &b.grads());
        }
        assert!(store.get("x").unwrap().norm() < 1e-2);
    }

    #[test]
    fn load_from_names_the_mismatched_parameter() {
        let mut a = ParamStore::new();
        a.insert("gcn.fc.weight", Tensor::zeros(&[2, 3]));
        let mut b = ParamStore::new();
        b.insert("gcn.fc.weight", Tensor::zeros(&[3, 3]));
        let err = a.load_from(&b).unwrap_err().to_string();
        assert!(err.contains("gcn.fc.weight"), "{err}");
    }

    #[test]
    fn initialization_is_seeded() {
        let mk = |seed| {
            let mut s = ParamStore::new();
            Linear::new(&mut s, &mut Init::new(seed), "l", 4, 2);
            s
        };
        assert_eq!(mk(1), mk(1));
        assert_ne!(mk(1), mk(2));
    }
}
