//! Synaptic Intelligence bookkeeping.
//!
//! During training at a center every optimizer step adds `-g_k * dtheta_k` to a running path
//! contribution `w_k`, with `g` the gradient of the segmentation loss alone. When the model leaves
//! the center, the contributions are folded into the importance
//!
//! ```text
//! omega_k += max(0, w_k) / ((theta_final_k - anchor_k)^2 + xi)
//! ```
//!
//! and the anchor moves to the final parameters. Later centers train against
//! `L_seg + c * sum_k omega_k * (anchor_k - theta_k)^2`.

use crate::error::{check_len, Error, Result};
use crate::losses::{seg_loss, LossConfig, LossValue};
use crate::nn::Session;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiConfig {
    pub c: f64,
    pub xi: f64,
}

impl Default for SiConfig {
    fn default() -> Self {
        Self { c: 0.1, xi: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiState<T = f32> {
    pub(crate) w_acc: Vec<T>,
    pub(crate) omega: Vec<T>,
    pub(crate) anchor: Vec<T>,
    pub(crate) prev_final: Vec<T>,
    pub(crate) c: f64,
    pub(crate) xi: f64,
    pub(crate) center_index: u32,
    pub(crate) steps_since_consolidation: u64,
}

/// One optimizer step as seen by the path integral.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord<'a, T> {
    /// Gradient of the segmentation loss (without the SI penalty).
    pub g: &'a [T],
    /// Parameter change the optimizer actually applied.
    pub delta_theta: &'a [T],
    pub t: u64,
}

impl<T: Scalar> SiState<T> {
    /// Fresh state anchored at the initial parameters.
    pub fn new(theta0: &[T], cfg: SiConfig) -> Result<Self> {
        if !(cfg.xi > 0.0) || !(cfg.c >= 0.0) {
            return Err(Error::Config(format!("invalid SI constants {cfg:?}")));
        }
        let n = theta0.len();
        Ok(Self {
            w_acc: vec![T::zero(); n],
            omega: vec![T::zero(); n],
            anchor: theta0.to_vec(),
            prev_final: theta0.to_vec(),
            c: cfg.c,
            xi: cfg.xi,
            center_index: 0,
            steps_since_consolidation: 0,
        })
    }

    /// Rebuilds a state from its serialized parts.
    pub fn from_parts(
        w_acc: Vec<T>,
        omega: Vec<T>,
        anchor: Vec<T>,
        prev_final: Vec<T>,
        c: f64,
        xi: f64,
        center_index: u32,
    ) -> Result<Self> {
        let n = w_acc.len();
        check_len(n, omega.len())?;
        check_len(n, anchor.len())?;
        check_len(n, prev_final.len())?;
        if !(xi > 0.0) {
            return Err(Error::Config("xi must be positive".into()));
        }
        if omega.iter().any(|&o| !(o >= T::zero())) {
            return Err(Error::Config("omega must be non-negative".into()));
        }
        let pending = w_acc.iter().any(|&w| w != T::zero()) as u64;
        Ok(Self {
            w_acc,
            omega,
            anchor,
            prev_final,
            c,
            xi,
            center_index,
            steps_since_consolidation: pending,
        })
    }

    pub fn w_acc(&self) -> &[T] {
        &self.w_acc
    }

    pub fn omega(&self) -> &[T] {
        &self.omega
    }

    pub fn anchor(&self) -> &[T] {
        &self.anchor
    }

    pub fn prev_final(&self) -> &[T] {
        &self.prev_final
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    pub fn center_index(&self) -> u32 {
        self.center_index
    }

    pub fn len(&self) -> usize {
        self.w_acc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w_acc.is_empty()
    }

    pub fn is_consolidated(&self) -> bool {
        self.center_index > 0
    }

    /// Adds one discretized path-integral step: `w_k += -g_k * dtheta_k`.
    pub fn accumulate(&mut self, rec: StepRecord<'_, T>) -> Result<()> {
        check_len(self.w_acc.len(), rec.g.len())?;
        check_len(self.w_acc.len(), rec.delta_theta.len())?;
        for ((w, &g), &d) in self.w_acc.iter_mut().zip(rec.g).zip(rec.delta_theta) {
            *w = *w - g * d;
        }
        self.steps_since_consolidation += 1;
        Ok(())
    }

    /// Folds the running contributions into `omega` at a center boundary.
    pub fn consolidate(&mut self, theta_final: &[T]) -> Result<()> {
        check_len(self.anchor.len(), theta_final.len())?;
        if self.steps_since_consolidation == 0 && self.center_index > 0 {
            return Err(Error::RepeatedConsolidation);
        }
        let xi = T::lit(self.xi);
        for (((o, w), a), &f) in self
            .omega
            .iter_mut()
            .zip(self.w_acc.iter_mut())
            .zip(self.anchor.iter())
            .zip(theta_final)
        {
            let d = f - *a;
            *o = *o + w.max(T::zero()) / (d * d + xi);
            *w = T::zero();
        }
        self.anchor.copy_from_slice(theta_final);
        self.prev_final.copy_from_slice(theta_final);
        self.center_index += 1;
        self.steps_since_consolidation = 0;
        Ok(())
    }

    /// `c * sum_k omega_k (anchor_k - theta_k)^2` and its gradient over `theta`.
    pub fn penalty(&self, theta: &[T]) -> Result<(f64, Vec<T>)> {
        check_len(self.anchor.len(), theta.len())?;
        if !self.is_consolidated() {
            return Ok((0.0, vec![T::zero(); theta.len()]));
        }
        let c = self.c;
        let two_c = T::lit(2.0 * c);
        let mut value = 0.0;
        let mut grad = Vec::with_capacity(theta.len());
        for ((&o, &a), &t) in self.omega.iter().zip(&self.anchor).zip(theta) {
            let d = t - a;
            let (of, df) = (o.to_f64().unwrap_or(f64::NAN), d.to_f64().unwrap_or(f64::NAN));
            value += of * df * df;
            grad.push(two_c * o * d);
        }
        Ok((c * value, grad))
    }
}

/// Segmentation loss plus SI penalty, with parameter gradients.
#[derive(Debug, Clone)]
pub struct TotalLoss<T> {
    pub seg: LossValue<T>,
    pub penalty: f64,
    pub total: f64,
    /// Gradient of `L_seg` alone; this is what the path integral sees.
    pub seg_grad: Vec<T>,
    /// Gradient of `L_seg + penalty`; this is what the optimizer sees.
    pub grad: Vec<T>,
}

/// Evaluates the full objective for predictions recorded by `session`.
pub fn total_loss<T: Scalar>(
    session: &Session<'_, T>,
    theta: &[T],
    pred: &Tensor<T>,
    target: &Tensor<T>,
    cfg: &LossConfig,
    si: Option<&SiState<T>>,
) -> Result<TotalLoss<T>> {
    let seg = seg_loss(pred, target, cfg)?;
    if !seg.total.is_finite() {
        return Err(Error::NonFinite("segmentation loss".into()));
    }
    let seg_grad = session.backward(&seg.grad_wrt_predictions)?;
    let (penalty, grad) = match si {
        Some(si) => {
            let (p, pg) = si.penalty(theta)?;
            let grad = seg_grad.iter().zip(&pg).map(|(&a, &b)| a + b).collect();
            (p, grad)
        }
        None => (0.0, seg_grad.clone()),
    };
    Ok(TotalLoss {
        total: seg.total + penalty,
        seg,
        penalty,
        seg_grad,
        grad,
    })
}
