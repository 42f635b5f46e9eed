//! Segmentation objectives. Every loss consumes probabilities (after the
//! sigmoid or softmax head), never raw logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::{Tensor, Var};

pub const DICE_EPS: f64 = 1e-6;
/// Probabilities are clamped to `[CLAMP_EPS, 1 − CLAMP_EPS]` before logs.
pub const CLAMP_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BinaryLossConfig {
    /// Weight on the cross-entropy term.
    pub alpha: f64,
    /// Weight on the Dice term.
    pub beta: f64,
    pub epsilon: f64,
}

impl Default for BinaryLossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            epsilon: DICE_EPS,
        }
    }
}

impl BinaryLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0
            || self.beta < 0.0
            || self.alpha + self.beta <= 0.0
            || self.epsilon <= 0.0
        {
            return Err(Error::Config(format!(
                "invalid binary loss weights {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultiClassLossConfig {
    pub gamma: f64,
    pub delta: f64,
    pub epsilon: f64,
    /// Fixed per-class weights; `None` derives them from the training masks.
    pub class_weights: Option<Vec<f64>>,
}

impl Default for MultiClassLossConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            delta: 1.0,
            epsilon: DICE_EPS,
            class_weights: None,
        }
    }
}

impl MultiClassLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0
            || self.delta < 0.0
            || self.gamma + self.delta <= 0.0
            || self.epsilon <= 0.0
        {
            return Err(Error::Config(format!(
                "invalid multi-class loss weights {self:?}"
            )));
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::Config(format!(
                    "class weights must be positive: {w:?}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub binary: BinaryLossConfig,
    pub multiclass: MultiClassLossConfig,
}

fn same_shape(pred: &Var, target: &Var) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::Dimension(format!(
            "prediction {:?} and target {:?} differ",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(())
}

fn check_unit_interval(v: &Var, what: &str) -> Result<()> {
    match v.data().iter().find(|x| !(0.0..=1.0).contains(*x)) {
        Some(x) => Err(Error::Domain(format!("{what} value {x} outside [0, 1]"))),
        None => Ok(()),
    }
}

/// `1 − (2·Σ p·s + ε) / (Σ p + Σ s + ε)` over every pixel of the batch.
pub fn dice_binary(pred: &Var, target: &Var, eps: f64) -> Result<Var> {
    same_shape(pred, target)?;
    check_unit_interval(pred, "prediction")?;
    check_unit_interval(target, "target")?;
    let num = pred.mul(target)?.sum().scale(2.0).add_scalar(eps);
    let den = pred.sum().add(&target.sum())?.add_scalar(eps);
    Ok(num.div(&den)?.neg().add_scalar(1.0))
}

/// Mean binary cross-entropy with clamped probabilities.
pub fn bce(pred: &Var, target: &Var, clamp: f64) -> Result<Var> {
    same_shape(pred, target)?;
    let p = pred.clamp(clamp, 1.0 - clamp);
    let pos = target.mul(&p.log())?;
    let neg = target
        .neg()
        .add_scalar(1.0)
        .mul(&p.neg().add_scalar(1.0).log())?;
    Ok(pos.add(&neg)?.mean().neg())
}

/// `α·BCE + β·Dice`.
pub fn binary_combined(pred: &Var, target: &Var, config: &BinaryLossConfig) -> Result<Var> {
    let ce = bce(pred, target, CLAMP_EPS)?.scale(config.alpha);
    let dice = dice_binary(pred, target, config.epsilon)?.scale(config.beta);
    ce.add(&dice)
}

fn check_class_probs(pred: &Var) -> Result<(usize, usize, usize)> {
    let (b, k, plane) = match *pred.shape() {
        [b, k, h, w] => (b, k, h * w),
        _ => {
            return Err(Error::Dimension(format!(
                "expected [B, K, H, W], got {:?}",
                pred.shape()
            )))
        }
    };
    if k < 2 {
        return Err(Error::Dimension(format!(
            "multi-class loss needs K ≥ 2, got {k}"
        )));
    }
    let d = pred.data();
    for bi in 0..b {
        for p in 0..plane {
            let s: f64 = (0..k).map(|c| d[(bi * k + c) * plane + p]).sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Domain(format!(
                    "class probabilities sum to {s}, not 1"
                )));
            }
        }
    }
    Ok((b, k, plane))
}

/// Per-class Dice loss averaged over all classes, background included.
pub fn dice_multiclass(pred: &Var, target: &Var, eps: f64) -> Result<Var> {
    same_shape(pred, target)?;
    check_class_probs(pred)?;
    let inter = pred.mul(target)?.sum_axes(&[0, 2, 3], false)?;
    let num = inter.scale(2.0).add_scalar(eps);
    let den = pred
        .sum_axes(&[0, 2, 3], false)?
        .add(&target.sum_axes(&[0, 2, 3], false)?)?
        .add_scalar(eps);
    Ok(num.div(&den)?.neg().add_scalar(1.0).mean())
}

/// Pixel count per class; labels must be `< classes`.
pub fn class_counts(masks: &[Mask], classes: usize) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; classes];
    for m in masks {
        for &l in &m.labels {
            match counts.get_mut(l as usize) {
                Some(c) => *c += 1,
                None => return Err(Error::Labeling(format!("label {l} is not below {classes}"))),
            }
        }
    }
    Ok(counts)
}

/// `ω_k = N / (K·N_k)`, before normalization.
pub fn inverse_frequency(counts: &[u64]) -> Result<Vec<f64>> {
    let total: u64 = counts.iter().sum();
    let k = counts.len() as f64;
    counts
        .iter()
        .enumerate()
        .map(|(class, &n)| {
            if n == 0 {
                Err(Error::MissingClass { class })
            } else {
                Ok(total as f64 / (k * n as f64))
            }
        })
        .collect()
}

/// Inverse-frequency weights rescaled to mean one.
pub fn class_weights(masks: &[Mask], classes: usize) -> Result<Vec<f64>> {
    let raw = inverse_frequency(&class_counts(masks, classes)?)?;
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(raw.iter().map(|w| w / mean).collect())
}

/// `−(1/N)·Σ_pixels Σ_k ω_k·S_k·log p_k`.
pub fn weighted_ce(pred: &Var, target: &Var, weights: &[f64], clamp: f64) -> Result<Var> {
    same_shape(pred, target)?;
    let (b, k, plane) = match *pred.shape() {
        [b, k, h, w] => (b, k, h * w),
        _ => {
            return Err(Error::Dimension(format!(
                "expected [B, K, H, W], got {:?}",
                pred.shape()
            )))
        }
    };
    if weights.len() != k {
        return Err(Error::Dimension(format!(
            "{} class weights for {k} classes",
            weights.len()
        )));
    }
    let w = pred
        .tape()
        .constant(&Tensor::new(&[1, k, 1, 1], weights.to_vec())?);
    let terms = target.mul(&pred.clamp(clamp, 1.0 - clamp).log())?.mul(&w)?;
    Ok(terms.sum().scale(-1.0 / (b * plane) as f64))
}

/// `γ·CE_ω + δ·Dice`.
pub fn multiclass_combined(
    pred: &Var,
    target: &Var,
    weights: &[f64],
    config: &MultiClassLossConfig,
) -> Result<Var> {
    let ce = weighted_ce(pred, target, weights, CLAMP_EPS)?.scale(config.gamma);
    let dice = dice_multiclass(pred, target, config.epsilon)?.scale(config.delta);
    ce.add(&dice)
}

fn stack_check(masks: &[Mask]) -> Result<(usize, usize)> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Usage("no masks given".into()))?;
    let (h, w) = (first.height, first.width);
    if masks.iter().any(|m| m.height != h || m.width != w) {
        return Err(Error::Shape(
            "masks in a batch must share their size".into(),
        ));
    }
    Ok((h, w))
}

/// `[B, 1, H, W]` foreground indicator.
pub fn binary_target(masks: &[Mask]) -> Result<Tensor> {
    let (h, w) = stack_check(masks)?;
    let data = masks
        .iter()
        .flat_map(|m| m.labels.iter().map(|&l| f64::from(u8::from(l > 0))))
        .collect();
    Tensor::new(&[masks.len(), 1, h, w], data)
}

/// `[B, K, H, W]` one-hot encoding.
pub fn one_hot(masks: &[Mask], classes: usize) -> Result<Tensor> {
    let (h, w) = stack_check(masks)?;
    let plane = h * w;
    let mut out = Tensor::zeros(&[masks.len(), classes, h, w]);
    let d = out.data_mut();
    for (b, m) in masks.iter().enumerate() {
        for (p, &l) in m.labels.iter().enumerate() {
            if l as usize >= classes {
                return Err(Error::Labeling(format!("label {l} is not below {classes}")));
            }
            d[(b * classes + l as usize) * plane + p] = 1.0;
        }
    }
    Ok(out)
}
