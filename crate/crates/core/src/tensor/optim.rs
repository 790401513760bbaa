//! Named parameter storage and the Adam optimizer with a cosine schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// One trainable tensor plus its gradient accumulator and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Param {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "param",
                detail: format!("shape {shape:?} vs {} values", data.len()),
            });
        }
        Ok(Param { shape, grad: vec![0.0; n], m: vec![0.0; n], v: vec![0.0; n], data })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Parameters keyed by name. BTreeMap keeps iteration order deterministic,
/// which checkpointing and gradient sweeps rely on.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    /// Number of Adam updates applied so far (drives bias correction).
    pub adam_t: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Usage(format!("parameter `{name}` registered twice")));
        }
        self.params.insert(name.to_string(), Param::new(shape, data)?);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.params.values().map(Param::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update on a single parameter. `t` counts updates
/// starting at 1.
pub fn adam_step(p: &mut Param, lr: f64, cfg: AdamConfig, t: u64) {
    let b1c = 1.0 - cfg.beta1.powi(t as i32);
    let b2c = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..p.data.len() {
        let g = p.grad[i];
        p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g;
        p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = p.m[i] / b1c;
        let vhat = p.v[i] / b2c;
        p.data[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

/// Half-cosine decay from `base_lr` at step 0 to 0 at `total_steps`.
pub fn cosine_schedule(step: u64, total_steps: u64, base_lr: f64) -> f64 {
    debug_assert!(total_steps > 0 && step <= total_steps);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
}
