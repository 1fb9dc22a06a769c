use serde::{Deserialize, Serialize};

use super::params::ParameterSet;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// SGD with poly learning-rate decay and L2 weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    /// Poly decay exponent.
    pub power: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Classical momentum; 0 gives plain SGD.
    #[serde(default)]
    pub momentum: f64,
    /// Rescales the joint gradient of one step to at most this L2 norm.
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            base_lr: 0.01,
            power: 0.9,
            weight_decay: 5e-3,
            batch_size: 16,
            seed: 0,
            momentum: 0.0,
            max_grad_norm: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be >= 0, got {}", self.base_lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.max_grad_norm.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::Config("max_grad_norm must be positive".into()));
        }
        if !self.power.is_finite() {
            return Err(Error::Config("power must be finite".into()));
        }
        Ok(())
    }

    /// `base_lr * (1 - t/T)^power`.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        if total_steps == 0 {
            return self.base_lr;
        }
        let frac = (1.0 - step as f64 / total_steps as f64).clamp(0.0, 1.0);
        self.base_lr * frac.powf(self.power)
    }
}

/// One SGD update of every trainable tensor in `params` from its accumulated
/// gradient: `p <- p - lr(t) * (g + weight_decay * p)`. Frozen tensors are
/// untouched. Gradients are checked before anything is written, so a
/// non-finite gradient leaves the set unchanged.
pub fn sgd_step<T: Real>(
    params: &mut ParameterSet<T>,
    config: &OptimizerConfig,
    step_index: usize,
    total_steps: usize,
) -> Result<()> {
    if total_steps > 0 && step_index >= total_steps {
        return Err(Error::Config(format!(
            "step index {step_index} out of range for {total_steps} total steps"
        )));
    }
    for p in params.iter() {
        if p.trainable && !p.grad.is_finite() {
            let bad = p.grad.data().iter().filter(|v| !v.is_finite()).count();
            return Err(Error::NonFinite(format!(
                "gradient of '{}' (shape {:?}, {bad} non-finite entries)",
                p.name,
                p.grad.shape()
            )));
        }
    }
    let lr = T::of(config.lr_at(step_index, total_steps));
    let wd = T::of(config.weight_decay);
    let momentum = T::of(config.momentum);
    for p in params.iter_mut().filter(|p| p.trainable) {
        if config.momentum > 0.0 {
            let vel = p
                .velocity
                .get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            for ((v, &g), &w) in vel
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(p.value.data())
            {
                *v = momentum * *v + g + wd * w;
            }
            let vel = p.velocity.as_ref().expect("just set");
            for (w, &v) in p.value.data_mut().iter_mut().zip(vel.data()) {
                *w -= lr * v;
            }
        } else {
            for (w, &g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                *w -= lr * (g + wd * *w);
            }
        }
    }
    Ok(())
}

/// Step counter shared by all parameter sets trained under one schedule.
#[derive(Clone, Debug)]
pub struct PolySgd {
    config: OptimizerConfig,
    total_steps: usize,
    step: usize,
}

impl PolySgd {
    pub fn new(config: OptimizerConfig, total_steps: usize) -> Self {
        PolySgd {
            config,
            total_steps,
            step: 0,
        }
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr_at(self.step, self.total_steps)
    }

    /// Applies one update to every set, then zeroes their gradients.
    pub fn step<'a, T: Real>(
        &mut self,
        sets: impl IntoIterator<Item = &'a mut ParameterSet<T>>,
    ) -> Result<()> {
        let mut sets: Vec<&mut ParameterSet<T>> = sets.into_iter().collect();
        // validate all before mutating any
        for set in sets.iter() {
            for p in set.iter() {
                if p.trainable && !p.grad.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of '{}'", p.name)));
                }
            }
        }
        if let Some(clip) = self.config.max_grad_norm {
            let norm = sets
                .iter()
                .flat_map(|s| s.iter())
                .filter(|p| p.trainable)
                .flat_map(|p| p.grad.data().iter().map(|g| g.as_f64().powi(2)))
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let scale = T::of(clip / norm);
                for set in sets.iter_mut() {
                    for p in set.iter_mut().filter(|p| p.trainable) {
                        p.grad.data_mut().iter_mut().for_each(|g| *g *= scale);
                    }
                }
            }
        }
        for set in sets.iter_mut() {
            sgd_step(set, &self.config, self.step, self.total_steps)?;
            set.zero_grad();
        }
        self.step += 1;
        Ok(())
    }
}
