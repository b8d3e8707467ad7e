//! Adam with weight decay, learning-rate schedules and recurrent-gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ParamGroup};
use crate::tensor::{Real, Tensor};

/// Accumulated gradient per parameter, aligned with [`Model::params`];
/// `None` for frozen parameters.
pub type Grads<T> = Vec<Option<Vec<T>>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// Clamp every recurrent gradient element to `[-limit, limit]`.
    Elementwise,
    /// Rescale the recurrent gradients so their joint L2 norm is at most `limit`.
    GlobalNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Apply weight decay directly to the parameters instead of adding it to the gradient.
    pub decoupled_weight_decay: bool,
    pub schedule: LrSchedule,
    pub clip_limit: f64,
    pub clip_mode: ClipMode,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
            decoupled_weight_decay: false,
            schedule: LrSchedule::Constant,
            clip_limit: 1.0,
            clip_mode: ClipMode::Elementwise,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.eps > 0.0) {
            return Err(Error::config("lr and eps must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) || !(self.clip_limit > 0.0) {
            return Err(Error::config("weight_decay must be >= 0 and clip_limit > 0"));
        }
        Ok(())
    }

    /// Learning rate for optimizer step `step` (0-based) out of `total`.
    pub fn learning_rate(&self, step: u64, total: u64) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let frac = if total == 0 { 0.0 } else { (step as f64 / total as f64).min(1.0) };
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(model: &Model<T>) -> Self {
        let zeros = || model.params().iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect();
        OptimizerState { m: zeros(), v: zeros(), step: 0 }
    }

    pub fn to_tensors(&self, model: &Model<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (kind, bufs) in [("m", &self.m), ("v", &self.v)] {
            for (p, b) in model.params().iter().zip(bufs) {
                let t = Tensor::new(p.tensor.shape().to_vec(), b.clone()).expect("moment matches parameter");
                out.push((format!("adam.{kind}/{}", p.name), t));
            }
        }
        out
    }

    pub fn from_tensors(model: &Model<T>, tensors: &[(String, Tensor<T>)], step: u64) -> Result<Self> {
        let mut state = Self::new(model);
        state.step = step;
        for (kind, bufs) in [("m", &mut state.m), ("v", &mut state.v)] {
            for (p, b) in model.params().iter().zip(bufs.iter_mut()) {
                let name = format!("adam.{kind}/{}", p.name);
                let t = tensors
                    .iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, t)| t)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer moment {name}")))?;
                if t.shape() != p.tensor.shape() {
                    return Err(Error::Checkpoint(format!("{name}: shape {:?} vs {:?}", t.shape(), p.tensor.shape())));
                }
                b.copy_from_slice(t.data());
            }
        }
        Ok(state)
    }
}

/// One bias-corrected Adam update of every trainable parameter. A missing
/// gradient for a trainable parameter counts as zero. Nothing is modified
/// when any gradient is non-finite.
pub fn adam_step<T: Real>(model: &mut Model<T>, grads: &Grads<T>, state: &mut OptimizerState<T>, cfg: &OptimConfig, lr: f64) -> Result<()> {
    if grads.len() != model.params().len() {
        return Err(Error::contract(format!("{} gradients for {} parameters", grads.len(), model.params().len())));
    }
    for (p, g) in model.params().iter().zip(grads) {
        if let Some(g) = g {
            if g.len() != p.tensor.numel() {
                return Err(Error::dim("adam_step", format!("{}: gradient length {} vs {}", p.name, g.len(), p.tensor.numel())));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric { op: p.name.clone(), msg: format!("gradient element {i} is {}", g[i]) });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let (lr, eps, wd) = (T::lit(lr), T::lit(cfg.eps), T::lit(cfg.weight_decay));
    for (i, p) in model.params_mut().iter_mut().enumerate() {
        if p.frozen() {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let g = grads[i].as_deref();
        for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
            let mut gj = g.map_or(T::zero(), |g| g[j]);
            if !cfg.decoupled_weight_decay {
                gj += wd * *w;
            }
            m[j] = b1 * m[j] + (T::one() - b1) * gj;
            v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
            let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            if cfg.decoupled_weight_decay {
                *w -= lr * wd * *w;
            }
            *w -= update;
        }
    }
    Ok(())
}

/// Clips the gradients of the recurrent layers; encoder and head gradients
/// are left alone.
pub fn clip_lstm_gradients<T: Real>(model: &Model<T>, grads: &mut Grads<T>, limit: f64, mode: ClipMode) {
    let lim = T::lit(limit);
    let recurrent = |i: usize| model.params()[i].group == ParamGroup::Recurrent;
    match mode {
        ClipMode::Elementwise => {
            for (i, g) in grads.iter_mut().enumerate() {
                if let (true, Some(g)) = (recurrent(i), g) {
                    g.iter_mut().for_each(|v| *v = v.max(-lim).min(lim));
                }
            }
        }
        ClipMode::GlobalNorm => {
            let sq: f64 = grads
                .iter()
                .enumerate()
                .filter(|(i, _)| recurrent(*i))
                .filter_map(|(_, g)| g.as_ref())
                .flat_map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()))
                .sum();
            let norm = sq.sqrt();
            if norm > limit {
                let s = T::lit(limit / norm);
                for (i, g) in grads.iter_mut().enumerate() {
                    if let (true, Some(g)) = (recurrent(i), g) {
                        g.iter_mut().for_each(|v| *v *= s);
                    }
                }
            }
        }
    }
}
