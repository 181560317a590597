//! Adam with bias correction, per-group base rates, warmup-then-linear-decay
//! schedule and global gradient-norm clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{GradientTape, ParamGroup, ParamId, ParamStore, TensorRecord};
use crate::tensor::Matrix;
use crate::Scalar;

/// Linear warmup over `warmup_steps`, then linear decay to zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl ScheduleConfig {
    /// Multiplier for the 1-based `step`.
    pub fn factor(&self, step: usize) -> f64 {
        let w = self.warmup_steps;
        let t = self.total_steps.max(w);
        if step == 0 {
            return 0.0;
        }
        if step <= w {
            return step as f64 / w as f64;
        }
        if t == w {
            return 1.0;
        }
        ((t as f64 - step as f64 + 1.0) / (t - w) as f64).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub retriever_lr: f64,
    pub reader_lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Global gradient-norm bound; `None` disables clipping.
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f64>,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_clip() -> Option<f64> {
    Some(1.0)
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            retriever_lr: 2e-6,
            reader_lr: 1e-5,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            clip_norm: default_clip(),
        }
    }
}

impl AdamConfig {
    pub fn base_lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Retriever => self.retriever_lr,
            ParamGroup::Reader => self.reader_lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub grad_norm: f64,
    pub clipped: bool,
    pub lr_factor: f64,
}

/// Optimizer over a fixed subset of a store's parameters.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    config: AdamConfig,
    schedule: ScheduleConfig,
    params: Vec<ParamId>,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    t: usize,
}

/// Serializable optimizer state, moments keyed by parameter name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: usize,
    pub m: BTreeMap<String, TensorRecord>,
    pub v: BTreeMap<String, TensorRecord>,
}

fn record<T: Scalar>(m: &Matrix<T>) -> TensorRecord {
    TensorRecord {
        rows: m.rows(),
        cols: m.cols(),
        data: m.data().iter().map(|x| x.as_f64()).collect(),
    }
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, params: Vec<ParamId>, config: AdamConfig, schedule: ScheduleConfig) -> Self {
        let zeros = |id: &ParamId| {
            let (r, c) = store.value(*id).shape();
            Matrix::zeros(r, c)
        };
        Adam {
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            params,
            config,
            schedule,
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// Applies one update from the gradients in `tape`; unreached parameters see zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, tape: &GradientTape<T>) -> Result<StepReport> {
        let sq: f64 = self
            .params
            .iter()
            .filter_map(|&id| tape.get(id))
            .map(|g| g.sum_sq().as_f64())
            .sum();
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("gradient norm is {norm}")));
        }
        let (clip, clipped) = match self.config.clip_norm {
            Some(c) if norm > c => (c / norm, true),
            _ => (1.0, false),
        };
        self.t += 1;
        let factor = self.schedule.factor(self.t);
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let (b1t, b2t, eps) = (T::of(b1), T::of(b2), T::of(self.config.eps));
        let clip_t = T::of(clip);
        for (i, &id) in self.params.iter().enumerate() {
            let lr = self.config.base_lr(store.param(id).group) * factor;
            let step_size = T::of(lr / bc1);
            let inv_bc2 = T::of(1.0 / bc2);
            let grad = tape.get(id);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = store.value_mut(id).data_mut();
            for j in 0..w.len() {
                let g = grad.map_or(T::zero(), |g| g.data()[j] * clip_t);
                m[j] = b1t * m[j] + (T::one() - b1t) * g;
                v[j] = b2t * v[j] + (T::one() - b2t) * g * g;
                w[j] -= step_size * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(StepReport {
            grad_norm: norm,
            clipped,
            lr_factor: factor,
        })
    }

    pub fn export(&self, store: &ParamStore<T>) -> AdamState {
        let name = |id: ParamId| store.param(id).name.clone();
        AdamState {
            t: self.t,
            m: self.params.iter().zip(&self.m).map(|(&id, m)| (name(id), record(m))).collect(),
            v: self.params.iter().zip(&self.v).map(|(&id, v)| (name(id), record(v))).collect(),
        }
    }

    pub fn import(&mut self, store: &ParamStore<T>, state: &AdamState) -> Result<()> {
        let mut problems = Vec::new();
        for (i, &id) in self.params.iter().enumerate() {
            let name = &store.param(id).name;
            for (moments, table) in [(&mut self.m, &state.m), (&mut self.v, &state.v)] {
                match table.get(name) {
                    Some(r) if (r.rows, r.cols) == moments[i].shape() && r.data.len() == r.rows * r.cols => {
                        for (dst, &src) in moments[i].data_mut().iter_mut().zip(&r.data) {
                            *dst = T::of(src);
                        }
                    }
                    Some(_) => problems.push(format!("moment for {name} has the wrong shape")),
                    None => problems.push(format!("missing moment for {name}")),
                }
            }
        }
        if state.m.len() != self.params.len() || state.v.len() != self.params.len() {
            problems.push("optimizer state covers a different parameter set".into());
        }
        if !problems.is_empty() {
            return Err(Error::Integrity(problems.join("; ")));
        }
        self.t = state.t;
        Ok(())
    }
}
