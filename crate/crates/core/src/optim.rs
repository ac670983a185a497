//! RMSProp with Nesterov momentum, and the halve-on-plateau learning-rate schedule.
//!
//! One step, per parameter:
//!
//! ```text
//! a <- rho * a + (1 - rho) * g^2
//! u <- g / sqrt(a + eps)
//! v <- m * v - lr * u
//! theta <- theta + m * v - lr * u
//! ```

use crate::error::{check_len, Error, Result};
use crate::nn::ModelState;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    pub momentum: f64,
    pub plateau_patience: usize,
    pub plateau_delta: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            rho: 0.9,
            eps: 1e-4,
            momentum: 0.6,
            plateau_patience: 5,
            plateau_delta: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub cfg: OptimizerConfig,
    lr: f64,
    mean_square: Vec<T>,
    velocity: Vec<T>,
    plateau_epochs: usize,
    best: Option<f64>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(cfg: OptimizerConfig, param_count: usize) -> Result<Self> {
        if !(cfg.lr > 0.0 && cfg.eps > 0.0 && (0.0..1.0).contains(&cfg.rho)) {
            return Err(Error::Config(format!("optimizer settings out of range: {cfg:?}")));
        }
        if !(0.0..1.0).contains(&cfg.momentum) {
            return Err(Error::Config(format!("momentum {} not in [0, 1)", cfg.momentum)));
        }
        Ok(Self {
            lr: cfg.lr,
            cfg,
            mean_square: vec![T::zero(); param_count],
            velocity: vec![T::zero(); param_count],
            plateau_epochs: 0,
            best: None,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn velocity(&self) -> &[T] {
        &self.velocity
    }

    pub fn mean_square(&self) -> &[T] {
        &self.mean_square
    }

    pub fn plateau_epochs(&self) -> usize {
        self.plateau_epochs
    }

    /// Applies one update in place and returns the realized parameter change.
    pub fn step(&mut self, model: &mut ModelState<T>, g: &[T]) -> Result<Vec<T>> {
        check_len(model.param_count(), g.len())?;
        check_len(self.velocity.len(), g.len())?;
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("optimizer input gradient".into()));
        }
        let rho = T::lit(self.cfg.rho);
        let one_minus_rho = T::lit(1.0 - self.cfg.rho);
        let eps = T::lit(self.cfg.eps);
        let m = T::lit(self.cfg.momentum);
        let lr = T::lit(self.lr);
        let mut delta = Vec::with_capacity(g.len());
        for (((theta, a), v), &gk) in model
            .theta_mut()
            .iter_mut()
            .zip(self.mean_square.iter_mut())
            .zip(self.velocity.iter_mut())
            .zip(g)
        {
            *a = rho * *a + one_minus_rho * gk * gk;
            let u = gk / (*a + eps).sqrt();
            *v = m * *v - lr * u;
            let d = m * *v - lr * u;
            *theta = *theta + d;
            delta.push(d);
        }
        Ok(delta)
    }

    /// Feeds the newest validation score (higher is better). The learning rate halves once the
    /// best score has gone `plateau_patience` epochs without improving by more than `plateau_delta`.
    pub fn observe(&mut self, score: f64) -> bool {
        match self.best {
            Some(b) if score <= b + self.cfg.plateau_delta => {
                self.plateau_epochs += 1;
            }
            _ => {
                self.best = Some(score);
                self.plateau_epochs = 0;
            }
        }
        if self.plateau_epochs >= self.cfg.plateau_patience {
            self.lr /= 2.0;
            self.plateau_epochs = 0;
            true
        } else {
            false
        }
    }

    /// Replays a whole validation history from a fresh schedule state.
    pub fn step_lr_on_plateau(&mut self, val_history: &[f64]) -> Result<()> {
        if val_history.is_empty() {
            return Err(Error::Config("empty validation history".into()));
        }
        self.best = None;
        self.plateau_epochs = 0;
        for &s in val_history {
            self.observe(s);
        }
        Ok(())
    }
}
