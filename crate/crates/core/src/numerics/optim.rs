//! Adam with decoupled weight decay, and the cosine learning-rate schedule.

use std::f64::consts::PI;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::params::ParameterStore;
use super::tape::Mat;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr_max: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr_max: 2e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    first: Vec<Mat>,
    second: Vec<Mat>,
    step: u64,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, store: &ParameterStore) -> Self {
        let zeros = || {
            store
                .entries()
                .iter()
                .map(|e| Array2::zeros(e.value.dim()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update at learning rate `lr`.
///
/// Weight decay is decoupled from the gradient: `θ ← θ − lr·wd·θ` is applied
/// before the moment-based step.
pub fn adam_step(store: &mut ParameterStore, opt: &mut OptimizerState, lr: f64) {
    opt.step += 1;
    let AdamConfig {
        weight_decay,
        beta1,
        beta2,
        eps,
        ..
    } = opt.config;
    let bc1 = 1.0 - beta1.powi(opt.step as i32);
    let bc2 = 1.0 - beta2.powi(opt.step as i32);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.is_trainable(id) {
            continue;
        }
        let i = id.0;
        let grad = store.grad(id).clone();
        let m = &mut opt.first[i];
        let v = &mut opt.second[i];
        Zip::from(&mut *m)
            .and(&mut *v)
            .and(&grad)
            .for_each(|m, v, &g| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
            });
        let value = store.value_mut(id);
        let decay = 1.0 - lr * weight_decay;
        Zip::from(value).and(&*m).and(&*v).for_each(|theta, &m, &v| {
            *theta *= decay;
            *theta -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
        });
    }
}

/// `lr_max · (1 + cos(π·step/total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::invalid("total_steps", "must be at least 1"));
    }
    if step > total_steps {
        return Err(Error::ScheduleRange {
            step,
            total: total_steps,
        });
    }
    let t = step as f64 / total_steps as f64;
    Ok(lr_max * (1.0 + (PI * t).cos()) / 2.0)
}
