//! Adam, the OneCycle learning-rate schedule, and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{GradMap, ParamStore};

/// Adam hyperparameters. No weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
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

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| (0.0..1.0).contains(&b);
        if !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(Error::config("adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("adam eps must be positive"));
        }
        Ok(())
    }
}

/// Moment estimates for every parameter array, plus the step count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        AdamState {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Checks that moment shapes mirror `params`.
    pub fn check_shapes(&self, params: &ParamStore) -> Result<()> {
        let ok = self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| m.len() == p.len() && v.len() == p.len());
        if ok {
            Ok(())
        } else {
            Err(Error::config("optimizer state does not match parameter shapes"))
        }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(params: &mut ParamStore, grads: &GradMap, state: &mut AdamState, lr: f64) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::config(format!("learning rate must be positive, got {lr}")));
    }
    state.check_shapes(params)?;
    if grads.values.len() != params.len()
        || params.iter().zip(&grads.values).any(|(p, g)| p.len() != g.len())
    {
        return Err(Error::config("gradient shapes do not match parameters"));
    }
    state.t += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.t as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(&grads.values)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for i in 0..p.data.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub max_norm: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig { max_norm: 0.1 }
    }
}

/// Rescales all gradients jointly so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut GradMap, cfg: ClipConfig) -> Result<f64> {
    if !(cfg.max_norm > 0.0) {
        return Err(Error::config("clip max_norm must be positive"));
    }
    for (name, g) in grads.names.iter().zip(&grads.values) {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "gradient of '{name}' is non-finite at entry {i} ({})",
                g[i]
            )));
        }
    }
    let norm = grads.global_norm();
    if norm > cfg.max_norm {
        let mut scale = cfg.max_norm / norm;
        // Shrink by ulps until the recomputed norm is within max_norm.
        let mut scaled = grads.clone();
        loop {
            for (dst, src) in scaled.values.iter_mut().zip(&grads.values) {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s * scale;
                }
            }
            if scaled.global_norm() <= cfg.max_norm {
                break;
            }
            scale *= 1.0 - f64::EPSILON;
        }
        *grads = scaled;
    }
    Ok(norm)
}

/// Cosine warm-up to `max_lr` followed by cosine annealing, stepped once
/// per optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneCycleSchedule {
    pub max_lr: f64,
    pub total_steps: usize,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl OneCycleSchedule {
    pub fn new(max_lr: f64, total_steps: usize) -> Self {
        OneCycleSchedule {
            max_lr,
            total_steps,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_lr > 0.0) || !self.max_lr.is_finite() {
            return Err(Error::config("max_lr must be positive"));
        }
        if self.total_steps < 2 {
            return Err(Error::config(format!(
                "one-cycle schedule needs at least 2 steps, got {}",
                self.total_steps
            )));
        }
        if !(self.pct_start > 0.0 && self.pct_start < 1.0) {
            return Err(Error::config("pct_start must lie in (0, 1)"));
        }
        if !(self.div_factor > 0.0) || !(self.final_div_factor > 0.0) {
            return Err(Error::config("division factors must be positive"));
        }
        Ok(())
    }

    pub fn initial_lr(&self) -> f64 {
        self.max_lr / self.div_factor
    }

    pub fn final_lr(&self) -> f64 {
        self.max_lr / self.final_div_factor
    }

    /// Step at which the peak is reached: `floor(pct_start * total_steps)`,
    /// kept inside `[1, total_steps - 1]` so both phases are non-empty.
    pub fn peak_step(&self) -> usize {
        ((self.pct_start * self.total_steps as f64).floor() as usize).clamp(1, self.total_steps - 1)
    }

    /// Learning rate at `step` in `[0, total_steps]`.
    pub fn lr(&self, step: usize) -> Result<f64> {
        self.validate()?;
        if step > self.total_steps {
            return Err(Error::config(format!(
                "step {step} is outside the schedule [0, {}]",
                self.total_steps
            )));
        }
        let peak = self.peak_step();
        let anneal = |start: f64, end: f64, frac: f64| {
            end + (start - end) / 2.0 * (1.0 + (std::f64::consts::PI * frac).cos())
        };
        Ok(if step == 0 {
            self.initial_lr()
        } else if step == peak {
            self.max_lr
        } else if step < peak {
            anneal(self.initial_lr(), self.max_lr, step as f64 / peak as f64)
        } else if step == self.total_steps {
            self.final_lr()
        } else {
            let frac = (step - peak) as f64 / (self.total_steps - peak) as f64;
            anneal(self.max_lr, self.final_lr(), frac)
        })
    }
}

/// Equivalent to `OneCycleSchedule::lr(step)`.
pub fn onecycle_lr(step: usize, sched: &OneCycleSchedule) -> Result<f64> {
    sched.lr(step)
}
