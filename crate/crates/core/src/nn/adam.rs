use candle_core::{backprop::GradStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 0.01, beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 1e-4 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, weight_decay: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidConfig(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("betas must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("weight decay must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Descend,
    Ascend,
}

/// Adam over a fixed list of variables. `Ascend` maximizes the objective.
#[derive(Debug)]
pub struct Adam {
    cfg: AdamConfig,
    direction: Direction,
    vars: Vec<Var>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(vars: Vec<Var>, cfg: AdamConfig, direction: Direction) -> Result<Self> {
        cfg.validate()?;
        let m = vars.iter().map(|v| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self { cfg, direction, vars, m, v, step: 0 })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn iteration(&self) -> u64 {
        self.step
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Applies one update using the gradients found in `grads`. Variables
    /// without a gradient are treated as having zero gradient.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        let gs: Vec<Option<Tensor>> =
            self.vars.iter().map(|v| grads.get(v.as_tensor()).cloned()).collect();
        self.step_with(&gs)
    }

    pub fn step_with(&mut self, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != self.vars.len() {
            return Err(Error::Precondition("gradient list length differs from variable list".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, var) in self.vars.iter().enumerate() {
            let theta = var.as_tensor().detach();
            let mut g = match &grads[i] {
                Some(g) => g.detach(),
                None => theta.zeros_like()?,
            };
            if self.direction == Direction::Ascend {
                g = g.neg()?;
            }
            if c.weight_decay > 0.0 {
                g = (g + (&theta * c.weight_decay)?)?;
            }
            self.m[i] = ((&self.m[i] * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            self.v[i] = ((&self.v[i] * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let mhat = (&self.m[i] / bc1)?;
            let vhat = (&self.v[i] / bc2)?;
            let upd = (mhat / (vhat.sqrt()? + c.eps)?)?;
            var.set(&(theta - (upd * c.lr)?)?)?;
        }
        Ok(())
    }

    /// `(step, first moments, second moments)` for checkpointing.
    pub fn state(&self) -> (u64, &[Tensor], &[Tensor]) {
        (self.step, &self.m, &self.v)
    }

    pub fn load_state(&mut self, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<()> {
        if m.len() != self.vars.len() || v.len() != self.vars.len() {
            return Err(Error::Checkpoint("optimizer state size mismatch".into()));
        }
        for ((var, mi), vi) in self.vars.iter().zip(&m).zip(&v) {
            if mi.dims() != var.dims() || vi.dims() != var.dims() {
                return Err(Error::Checkpoint("optimizer state shape mismatch".into()));
            }
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }
}
