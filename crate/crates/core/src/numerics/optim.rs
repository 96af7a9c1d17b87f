use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::{ParameterStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    AdamW,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    /// Peak learning rate reached at the end of warmup.
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// L2 penalty for Adam, decoupled decay for AdamW.
    pub weight_decay: f32,
    pub warmup_steps: u64,
    /// Exponential decay factor applied once per `decay_every` steps after warmup.
    pub decay_gamma: f32,
    pub decay_every: u64,
    /// Global gradient-norm clip during warmup.
    pub clip_norm_warmup: f32,
    /// Global gradient-norm clip after warmup.
    pub clip_norm: f32,
}

impl OptimizerConfig {
    /// Score encoder defaults: Adam, lr 5e-4, clip 1.0.
    pub fn stage1() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            weight_decay: 0.0,
            warmup_steps: 0,
            decay_gamma: 0.999,
            decay_every: 1000,
            clip_norm_warmup: 1.0,
            clip_norm: 1.0,
        }
    }

    /// Vocoder defaults: AdamW, lr 1e-4, clip 100 during warmup and 500 after.
    pub fn stage2() -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            lr: 1e-4,
            beta1: 0.8,
            beta2: 0.99,
            eps: 1e-9,
            weight_decay: 0.01,
            warmup_steps: 40_000,
            decay_gamma: 0.999,
            decay_every: 1000,
            clip_norm_warmup: 100.0,
            clip_norm: 500.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.decay_gamma > 0.0
            && self.decay_gamma <= 1.0
            && self.decay_every > 0
            && self.clip_norm > 0.0
            && self.clip_norm_warmup > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }

    /// Linear warmup to the peak, then `gamma^((step - warmup) / every)`.
    pub fn lr_at(&self, step: u64) -> f32 {
        if step < self.warmup_steps {
            self.lr * (step + 1) as f32 / self.warmup_steps as f32
        } else {
            let k = (step - self.warmup_steps) as f64 / self.decay_every as f64;
            (self.lr as f64 * (self.decay_gamma as f64).powf(k)) as f32
        }
    }

    pub fn clip_at(&self, step: u64) -> f32 {
        if step < self.warmup_steps {
            self.clip_norm_warmup
        } else {
            self.clip_norm
        }
    }
}

/// Moment buffers and counters of an Adam/AdamW run.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    first: IndexMap<String, Vec<f32>>,
    second: IndexMap<String, Vec<f32>>,
    pub step: u64,
    pub skipped: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub grad_norm: f32,
    pub clip_scale: f32,
    pub lr: f32,
}

const M_PREFIX: &str = "__opt.m/";
const V_PREFIX: &str = "__opt.v/";
const STEP_KEY: &str = "__opt.step";

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            first: IndexMap::new(),
            second: IndexMap::new(),
            step: 0,
            skipped: 0,
        }
    }

    pub fn moments(&self, name: &str) -> Option<(&[f32], &[f32])> {
        Some((self.first.get(name)?, self.second.get(name)?))
    }

    /// Stores moments and counters as `__`-prefixed tensors so they travel
    /// inside the same checkpoint as the parameters.
    pub fn export_into(&self, store: &mut ParameterStore) {
        for (name, m) in &self.first {
            let shape = store.get(name).map(|t| t.shape().to_vec()).unwrap_or(vec![m.len()]);
            store.set(format!("{M_PREFIX}{name}"), Tensor::new(&shape, m.clone()).expect("moment shape"));
            let v = self.second[name].clone();
            store.set(format!("{V_PREFIX}{name}"), Tensor::new(&shape, v).expect("moment shape"));
        }
        store.set(STEP_KEY, Tensor::new(&[2], split_counter(self.step)).expect("counter"));
    }

    pub fn import_from(config: OptimizerConfig, store: &ParameterStore) -> Self {
        let mut st = Self::new(config);
        for (name, t) in store.iter() {
            if let Some(p) = name.strip_prefix(M_PREFIX) {
                st.first.insert(p.to_string(), t.data().to_vec());
            } else if let Some(p) = name.strip_prefix(V_PREFIX) {
                st.second.insert(p.to_string(), t.data().to_vec());
            }
        }
        if let Some(t) = store.get(STEP_KEY) {
            st.step = join_counter(t.data());
        }
        st
    }
}

pub(crate) fn split_counter(v: u64) -> Vec<f32> {
    vec![(v >> 24) as f32, (v & 0xFF_FFFF) as f32]
}

pub(crate) fn join_counter(d: &[f32]) -> u64 {
    ((d[0] as u64) << 24) | d[1] as u64
}

/// One optimizer update over every trainable parameter of `store`:
/// global-norm clipping, Adam/AdamW moments, then schedule advance.
/// Gradients are zeroed afterwards. A non-finite gradient skips the step.
pub fn adamw_step(store: &mut ParameterStore, opt: &mut OptimizerState) -> Result<StepReport> {
    let cfg = opt.config.clone();
    let sq: f64 = store
        .iter()
        .filter(|(n, t)| t.requires_grad() && !n.starts_with("__"))
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum();
    let norm = sq.sqrt();
    if !norm.is_finite() {
        opt.skipped += 1;
        store.zero_grad();
        log::warn!("skipping optimizer step {}: non-finite gradient ({} skipped)", opt.step, opt.skipped);
        return Err(Error::Numerics(format!("non-finite gradient norm at step {}", opt.step)));
    }
    let clip = cfg.clip_at(opt.step) as f64;
    let clip_scale = if norm > clip { (clip / norm) as f32 } else { 1.0 };
    let lr = cfg.lr_at(opt.step);
    let t = (opt.step + 1) as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, tensor) in store.iter_mut() {
        if !tensor.requires_grad() || name.starts_with("__") {
            continue;
        }
        let n = tensor.numel();
        let m = opt.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = opt.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let (data, grad) = tensor.split_mut();
        let grad = grad.expect("trainable tensor has a gradient buffer");
        for i in 0..n {
            let mut g = grad[i] * clip_scale;
            if cfg.kind == OptimizerKind::Adam && cfg.weight_decay > 0.0 {
                g += cfg.weight_decay * data[i];
            }
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            if cfg.kind == OptimizerKind::AdamW {
                data[i] -= lr * cfg.weight_decay * data[i];
            }
            data[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
    }
    opt.step += 1;
    store.step += 1;
    if !store.all_finite() {
        return Err(Error::Numerics(format!("parameters became non-finite at step {}", opt.step)));
    }
    Ok(StepReport {
        grad_norm: norm as f32,
        clip_scale,
        lr,
    })
}
