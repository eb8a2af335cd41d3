//! SGD with gradient-norm clipping, coupled weight decay, stall-based
//! learning-rate decay, and non-monotonically triggered parameter
//! averaging (NT-ASGD).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LmModel;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// NT-ASGD non-monotone interval: number of prior validations the
    /// current one must fail to beat before averaging triggers.
    pub non_monotone_interval: usize,
    /// Multiplier applied to the learning rate after a stall.
    pub lr_decay: f64,
    /// Consecutive non-improving validations that count as a stall.
    pub stall_patience: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 30.0,
            weight_decay: 1.2e-6,
            clip_norm: 0.25,
            non_monotone_interval: 5,
            lr_decay: 0.1,
            stall_patience: 20,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.weight_decay < 0.0 || self.clip_norm <= 0.0 {
            return Err(Error::Config(
                "weight_decay must be >= 0 and clip_norm > 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.lr_decay) {
            return Err(Error::Config(format!(
                "lr_decay must be in (0, 1), got {}",
                self.lr_decay
            )));
        }
        if self.non_monotone_interval == 0 || self.stall_patience == 0 {
            return Err(Error::Config(
                "non_monotone_interval and stall_patience must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Averaging {
    Off,
    /// Averaging on; never reverts within a run.
    Triggered { at_validation: usize },
}

/// Mutable optimizer state for one run.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: OptimConfig,
    pub lr: f64,
    pub averaging: Averaging,
    /// Sum of post-update parameter snapshots since trigger, aligned with
    /// the model's parameter order; mean = sum / count.
    shadow_sum: Option<Vec<Vec<f64>>>,
    shadow_count: u64,
    pub val_history: Vec<f64>,
    pub epoch: usize,
    best_val: f64,
    stall: usize,
    pub decay_events: usize,
}

impl OptimizerState {
    pub fn new(config: OptimConfig) -> Result<Self> {
        config.validate()?;
        Ok(OptimizerState {
            lr: config.lr,
            config,
            averaging: Averaging::Off,
            shadow_sum: None,
            shadow_count: 0,
            val_history: Vec::new(),
            epoch: 0,
            best_val: f64::INFINITY,
            stall: 0,
            decay_events: 0,
        })
    }

    pub fn global_grad_norm(model: &LmModel) -> f64 {
        model
            .params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// One SGD update: coupled weight decay, global-norm clip, descent,
    /// then (if averaging is on) a shadow snapshot of post-update θ.
    pub fn sgd_step(&mut self, model: &mut LmModel) {
        let wd = self.config.weight_decay;
        if wd != 0.0 {
            for p in model.params.iter_mut() {
                for (g, v) in p.grad.data_mut().iter_mut().zip(p.value.data()) {
                    *g += wd * v;
                }
            }
        }
        let norm = Self::global_grad_norm(model);
        let scale = if norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        };
        let step = self.lr * scale;
        for p in model.params.iter_mut() {
            for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                *v -= step * g;
            }
        }
        if matches!(self.averaging, Averaging::Triggered { .. }) {
            self.record_snapshot(model);
        }
    }

    fn record_snapshot(&mut self, model: &LmModel) {
        let sum = self.shadow_sum.get_or_insert_with(|| {
            model
                .params
                .iter()
                .map(|p| vec![0.0; p.value.data().len()])
                .collect()
        });
        for (acc, p) in sum.iter_mut().zip(&model.params) {
            for (a, v) in acc.iter_mut().zip(p.value.data()) {
                *a += v;
            }
        }
        self.shadow_count += 1;
    }

    /// NT-ASGD rule, called once per validation with the current metric
    /// (lower is better). Triggers when at least n prior validations
    /// exist and the current metric fails to beat their minimum. Also
    /// advances the stall-based learning-rate decay. Returns true on the
    /// validation where averaging switches on.
    pub fn observe_validation(&mut self, val_metric: f64, model: &LmModel) -> bool {
        let n = self.config.non_monotone_interval;
        let mut just_triggered = false;
        if self.averaging == Averaging::Off && self.val_history.len() >= n {
            let recent_min = self.val_history[self.val_history.len() - n..]
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            if val_metric >= recent_min {
                self.averaging = Averaging::Triggered {
                    at_validation: self.val_history.len(),
                };
                // θ at trigger time is itself a post-update snapshot.
                self.record_snapshot(model);
                just_triggered = true;
            }
        }
        self.val_history.push(val_metric);
        if val_metric < self.best_val {
            self.best_val = val_metric;
            self.stall = 0;
        } else {
            self.stall += 1;
            if self.stall >= self.config.stall_patience {
                self.lr *= self.config.lr_decay;
                self.stall = 0;
                self.decay_events += 1;
            }
        }
        just_triggered
    }

    pub fn averaging_active(&self) -> bool {
        matches!(self.averaging, Averaging::Triggered { .. })
    }

    /// Mean of the post-update snapshots accumulated since trigger.
    pub fn averaged_values(&self) -> Option<Vec<Vec<f64>>> {
        let sum = self.shadow_sum.as_ref()?;
        let k = self.shadow_count as f64;
        Some(
            sum.iter()
                .map(|acc| acc.iter().map(|a| a / k).collect())
                .collect(),
        )
    }

    /// Copy of the model carrying the averaged shadow, for evaluation and
    /// checkpointing after trigger; the raw model if averaging is off.
    pub fn eval_model(&self, model: &LmModel) -> LmModel {
        match self.averaged_values() {
            None => model.clone(),
            Some(values) => {
                let mut out = model.clone();
                for (p, v) in out.params.iter_mut().zip(values) {
                    p.value.data_mut().copy_from_slice(&v);
                }
                out
            }
        }
    }
}
