//! Named parameter storage with gradient accumulators, plus Adam.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// How a freshly registered parameter tensor is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-limit, limit]` with `limit = sqrt(6 / (fan_in + fan_out))`.
    XavierUniform {
        fan_in: usize,
        fan_out: usize,
    },
    /// Uniform in `[-scale, scale]`.
    Uniform(f64),
}

/// Named parameter tensors with per-parameter gradient accumulators.
///
/// Registration draws from a seeded RNG in call order, so two stores
/// built by the same code path from the same seed are bit-identical.
pub struct ParamStore {
    seed: u64,
    rng: ChaCha8Rng,
    params: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
    steps_trained: u64,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-')
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: BTreeMap::new(),
            grads: BTreeMap::new(),
            steps_trained: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn steps_trained(&self) -> u64 {
        self.steps_trained
    }

    pub fn add_steps(&mut self, n: u64) {
        self.steps_trained += n;
    }

    pub fn set_steps_trained(&mut self, n: u64) {
        self.steps_trained = n;
    }

    pub fn register(&mut self, name: &str, shape: &[usize], init: Init) -> Result<()> {
        if !valid_name(name) {
            return Err(Error::Contract(format!("invalid parameter name {name:?}")));
        }
        if self.params.contains_key(name) {
            return Err(Error::Contract(format!("parameter {name} already registered")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::XavierUniform { fan_in, fan_out } => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| self.rng.gen_range(-limit..limit)).collect()
            }
            Init::Uniform(scale) => (0..n).map(|_| self.rng.gen_range(-scale..scale)).collect(),
        };
        self.params.insert(name.to_string(), Tensor::from_vec(shape, data)?);
        self.grads.insert(name.to_string(), Tensor::zeros(shape));
        Ok(())
    }

    /// Insert a parameter with explicit contents (checkpoint loading).
    pub fn register_raw(&mut self, name: &str, value: Tensor) -> Result<()> {
        if !valid_name(name) {
            return Err(Error::Contract(format!("invalid parameter name {name:?}")));
        }
        let shape = value.shape().to_vec();
        if self.params.insert(name.to_string(), value).is_some() {
            return Err(Error::Contract(format!("parameter {name} already registered")));
        }
        self.grads.insert(name.to_string(), Tensor::zeros(&shape));
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::State(format!("unknown parameter {name}")))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "parameter {name} has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.grads
            .get(name)
            .ok_or_else(|| Error::State(format!("unknown parameter {name}")))
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor) -> Result<()> {
        let slot = self
            .grads
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("unknown parameter {name}")))?;
        if slot.shape() != g.shape() {
            return Err(Error::Dimension(format!(
                "gradient for {name} has shape {:?}, expected {:?}",
                g.shape(),
                slot.shape()
            )));
        }
        slot.add_assign(g);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.data_mut().fill(0.0);
        }
    }

    /// Parameter names in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Nudge one coordinate of one parameter (finite differences).
    pub fn perturb(&mut self, name: &str, index: usize, delta: f64) -> Result<()> {
        let t = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("unknown parameter {name}")))?;
        if index >= t.numel() {
            return Err(Error::Dimension(format!(
                "index {index} out of {} in {name}",
                t.numel()
            )));
        }
        t.data_mut()[index] += delta;
        Ok(())
    }
}

/// Adam with bias correction. Moment tensors live here, keyed like the
/// store, so checkpoints can capture and restore the full optimizer state.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Apply one update from the store's accumulated gradients, then
    /// clear them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let names: Vec<String> = store.names().map(String::from).collect();
        for name in names {
            let g = store.grad(&name)?.clone();
            let shape = g.shape().to_vec();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(&shape));
            for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            }
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(&shape));
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let m = self.m[&name].clone();
            let v = self.v[&name].clone();
            let mut p = store.get(&name)?.clone();
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            store.set(&name, p)?;
        }
        store.zero_grads();
        Ok(())
    }
}
