//! Named parameter storage and the Adam optimizer.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Ordered map of named parameter tensors. Iteration order is the key order,
/// which keeps serialization and optimizer updates deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::config(alloc::format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::config(alloc::format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor)> {
        self.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    /// Moves every entry of `other` into this store, replacing existing names.
    pub fn merge(&mut self, other: ParamStore) {
        self.entries.extend(other.entries);
    }
}

impl FromIterator<(String, Tensor)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamStore {
            entries: iter.into_iter().collect(),
        }
    }
}

/// Parameters registered on a tape, keyed by name.
#[derive(Clone, Debug, Default)]
pub struct TapeParams {
    vars: BTreeMap<String, Var>,
}

impl TapeParams {
    /// Registers every parameter of `store` whose name starts with one of
    /// `trainable` as a gradient leaf; the rest become constants.
    pub fn register(tape: &mut Tape, store: &ParamStore, trainable: &[&str]) -> Self {
        let vars = store
            .iter()
            .map(|(name, t)| {
                let rg = trainable.iter().any(|p| name.starts_with(p));
                (name.to_string(), tape.leaf(t.clone(), rg))
            })
            .collect();
        TapeParams { vars }
    }

    /// Wraps variables that are already on a tape.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        TapeParams {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(alloc::format!("missing parameter `{name}`")))
    }

    /// Gradients after `tape.backward`, for parameters whose name starts with `prefix`.
    pub fn grads(&self, tape: &Tape, prefix: &str) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .filter_map(|(k, &v)| tape.grad(v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}

/// Uniform initialization in `[-bound, bound]`.
pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..=bound);
    }
    t
}

/// Fan-in scaled uniform initialization for an `fan_in × fan_out` weight.
pub fn kaiming_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let bound = libm::sqrt(6.0 / fan_in as f64);
    uniform(&[fan_in, fan_out], bound, rng)
}

#[derive(Clone, Copy, Debug, PartialEq)]
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

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

/// Adam with bias correction. One instance per optimizer; the step counter
/// is shared by all parameters it updates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter in `grads`. `lr` maps a
    /// parameter name to its learning rate. Gradients are validated before
    /// any parameter is touched.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: impl Fn(&str) -> f64,
    ) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adam_step", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(beta1, t as f64);
        let bc2 = 1.0 - libm::pow(beta2, t as f64);
        for (name, g) in grads {
            let rate = lr(name);
            let p = params.get_mut(name)?;
            let mo = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
            });
            let gd = g.data();
            let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * gd[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * gd[i] * gd[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *w -= rate * m_hat / (libm::sqrt(v_hat) + eps);
            }
        }
        Ok(())
    }

    pub fn state_names(&self) -> Vec<&str> {
        self.moments.keys().map(String::as_str).collect()
    }
}
