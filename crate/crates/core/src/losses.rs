//! Segmentation objective: binary cross-entropy plus the volume-level sensitivity-specificity
//! (VSS) loss. Every batch entry counts as one volume.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probabilities are clipped to `[BCE_CLIP, 1 - BCE_CLIP]` inside the logarithms.
pub const BCE_CLIP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the sensitivity term, in `[0, 1]`.
    pub alpha: f64,
    /// Denominator guard of the soft sensitivity and specificity.
    pub epsilon_den: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.95,
            epsilon_den: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} not in [0, 1]", self.alpha)));
        }
        if !(self.epsilon_den > 0.0) {
            return Err(Error::Config("epsilon_den must be positive".into()));
        }
        Ok(())
    }
}

/// One loss term with its gradient with respect to the predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm<T> {
    pub value: f64,
    pub grad: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue<T> {
    pub total: f64,
    pub bce: f64,
    pub vss: f64,
    pub grad_wrt_predictions: Tensor<T>,
}

fn check_shapes<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// Mean voxelwise binary cross-entropy.
pub fn bce_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<LossTerm<T>> {
    check_shapes(pred, target)?;
    let n = pred.len() as f64;
    let mut sum = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &y) in pred.data().iter().zip(target.data()) {
        let p = p.to_f64().unwrap_or(f64::NAN).clamp(BCE_CLIP, 1.0 - BCE_CLIP);
        let y = y.to_f64().unwrap_or(f64::NAN);
        sum -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        grad.push(T::lit((-y / p + (1.0 - y) / (1.0 - p)) / n));
    }
    Ok(LossTerm {
        value: sum / n,
        grad: Tensor::new(pred.shape().to_vec(), grad)?,
    })
}

/// `alpha * (1 - soft_sensitivity) + (1 - alpha) * (1 - soft_specificity)` per volume, averaged
/// over the batch. Volumes without foreground contribute only the specificity term.
pub fn vss_loss<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<LossTerm<T>> {
    check_shapes(pred, target)?;
    let batch = pred.batch();
    let inv_batch = 1.0 / batch as f64;
    let (alpha, eps) = (cfg.alpha, cfg.epsilon_den);
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for i in 0..batch {
        let (p, y) = (pred.sample(i), target.sample(i));
        let (mut fg, mut bg, mut tp, mut tn) = (0.0, 0.0, 0.0, 0.0);
        for (&pk, &yk) in p.iter().zip(y) {
            let (pk, yk) = (pk.to_f64().unwrap_or(f64::NAN), yk.to_f64().unwrap_or(f64::NAN));
            fg += yk;
            bg += 1.0 - yk;
            tp += pk * yk;
            tn += (1.0 - pk) * (1.0 - yk);
        }
        let spec = tn / (bg + eps);
        let has_fg = fg > 0.0;
        let mut v = (1.0 - alpha) * (1.0 - spec);
        if has_fg {
            v += alpha * (1.0 - tp / (fg + eps));
        }
        total += v;
        let g_fg = if has_fg { -alpha / (fg + eps) } else { 0.0 };
        let g_bg = (1.0 - alpha) / (bg + eps);
        for &yk in y {
            let yk = yk.to_f64().unwrap_or(f64::NAN);
            grad.push(T::lit((g_fg * yk + g_bg * (1.0 - yk)) * inv_batch));
        }
    }
    Ok(LossTerm {
        value: total * inv_batch,
        grad: Tensor::new(pred.shape().to_vec(), grad)?,
    })
}

/// `L_seg = L_BCE + L_VSS`.
pub fn seg_loss<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<LossValue<T>> {
    let bce = bce_loss(pred, target)?;
    let vss = vss_loss(pred, target, cfg)?;
    let mut grad = bce.grad;
    for (g, &v) in grad.data_mut().iter_mut().zip(vss.grad.data()) {
        *g = *g + v;
    }
    Ok(LossValue {
        total: bce.value + vss.value,
        bce: bce.value,
        vss: vss.value,
        grad_wrt_predictions: grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, v: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, v).unwrap()
    }

    #[test]
    fn bce_limits() {
        let y = t(vec![2, 3], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let perfect = t(vec![2, 3], y.data().iter().map(|&v| if v > 0.5 { 1.0 - 1e-7 } else { 1e-7 }).collect());
        assert!(bce_loss(&perfect, &y).unwrap().value < 1e-6);
        let half = t(vec![2, 3], vec![0.5; 6]);
        assert!((bce_loss(&half, &y).unwrap().value - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_loss(&half, &y).unwrap().value - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn vss_closed_forms() {
        let cfg = LossConfig::default();
        let y = t(vec![1, 4], vec![1.0, 0.0, 0.0, 1.0]);
        let half = t(vec![1, 4], vec![0.5; 4]);
        let v = vss_loss(&half, &y, &cfg).unwrap().value;
        assert!((v - 0.5).abs() < 1e-6);
        let perfect = y.clone();
        assert!(vss_loss(&perfect, &y, &cfg).unwrap().value < 1e-5);
        for alpha in [0.0, 0.3, 1.0] {
            let c = LossConfig { alpha, ..cfg };
            assert!((vss_loss(&half, &y, &c).unwrap().value - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn vss_background_only_volume_uses_specificity_term() {
        let cfg = LossConfig::default();
        let y = t(vec![1, 4], vec![0.0; 4]);
        let p = t(vec![1, 4], vec![0.5; 4]);
        let term = vss_loss(&p, &y, &cfg).unwrap();
        // only (1 - alpha) * (1 - spec) with spec ~= 0.5
        assert!((term.value - 0.05 * 0.5).abs() < 1e-6);
        let zero = t(vec![1, 4], vec![1e-9; 4]);
        assert!(vss_loss(&zero, &y, &cfg).unwrap().value < 1e-6);
    }

    #[test]
    fn seg_is_sum_of_terms() {
        let cfg = LossConfig::default();
        let y = t(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]);
        let p = t(vec![2, 2], vec![0.7, 0.2, 0.4, 0.1]);
        let s = seg_loss(&p, &y, &cfg).unwrap();
        let b = bce_loss(&p, &y).unwrap();
        let v = vss_loss(&p, &y, &cfg).unwrap();
        assert_eq!(s.total, s.bce + s.vss);
        assert_eq!(s.bce, b.value);
        for ((g, a), c) in s.grad_wrt_predictions.data().iter().zip(b.grad.data()).zip(v.grad.data()) {
            assert_eq!(*g, a + c);
        }
    }

    #[test]
    fn shape_mismatch() {
        let cfg = LossConfig::default();
        let a = t(vec![1, 4], vec![0.5; 4]);
        let b = t(vec![2, 2], vec![0.0; 4]);
        assert!(bce_loss(&a, &b).is_err());
        assert!(vss_loss(&a, &b, &cfg).is_err());
        assert!(seg_loss(&a, &b, &cfg).is_err());
        assert!(LossConfig { alpha: 1.5, ..cfg }.validate().is_err());
        assert!(LossConfig { epsilon_den: 0.0, ..cfg }.validate().is_err());
    }
}
