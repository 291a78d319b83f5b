//! Dual loss for training with a shadow "blurred" class.
//!
//! Samples carrying a real grade label in `0..C` are scored with one-hot
//! cross-entropy. Samples carrying the blur label (`C`, one past the last real
//! class) are scored with the mean squared error between the softmax output
//! and the uniform distribution, pushing the model towards maximal
//! uncertainty on images that carry only background information. The model
//! head never grows a sixth output: the blur label exists only here.
//!
//! All arithmetic is done in `f64`. Gradients with respect to the logits are
//! provided in closed form so the trainer never needs finite differences.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of real DR grades.
pub const NUM_GRADES: usize = 5;

/// Label index reserved for blurred adversarial twins.
pub const BLUR_LABEL: usize = 5;

/// Probabilities are floored at this value before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub num_classes: usize,
    pub blur_label: usize,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { num_classes: NUM_GRADES, blur_label: BLUR_LABEL, reduction: Reduction::Mean }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("train.loss.num_classes", format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.blur_label != self.num_classes {
            return Err(Error::config(
                "train.loss.blur_label",
                format!("blur label must equal num_classes ({}), got {}", self.num_classes, self.blur_label),
            ));
        }
        Ok(())
    }

    /// The uniform target `u`, with `u_c = 1/C`.
    pub fn uniform_target(&self) -> Vec<f64> {
        vec![1.0 / self.num_classes as f64; self.num_classes]
    }
}

/// Which branch of the dual loss scored a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    /// Original image: cross-entropy.
    #[serde(rename = "OI")]
    Original,
    /// Blurred image: MSE to the uniform distribution.
    #[serde(rename = "BI")]
    Blurred,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    pub per_sample: Vec<f64>,
    pub branch_tags: Vec<Branch>,
}

impl LossOutput {
    /// Mean loss over the samples that took `branch`, if any did.
    pub fn branch_mean(&self, branch: Branch) -> Option<f64> {
        let (sum, n) = self
            .per_sample
            .iter()
            .zip(&self.branch_tags)
            .filter(|(_, b)| **b == branch)
            .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
        (n > 0).then(|| sum / n as f64)
    }
}

fn check_finite(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::Loss("empty logit vector".into()));
    }
    if let Some(v) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::Loss(format!("non-finite logit {v}")));
    }
    Ok(())
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    check_finite(logits)?;
    Ok(softmax_unchecked(logits))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// One-hot cross-entropy `-ln softmax(logits)[label]`.
pub fn original_image_loss(logits: &[f64], label: usize) -> Result<f64> {
    check_finite(logits)?;
    if label >= logits.len() {
        return Err(Error::Loss(format!("label {label} out of range for {} classes", logits.len())));
    }
    let p = softmax_unchecked(logits);
    Ok(-p[label].max(PROB_FLOOR).ln())
}

/// `(1/C) * sum_c (softmax(logits)_c - 1/C)^2`.
pub fn blurred_image_loss(logits: &[f64], cfg: &LossConfig) -> Result<f64> {
    check_finite(logits)?;
    check_width(logits.len(), cfg)?;
    let p = softmax_unchecked(logits);
    let u = 1.0 / cfg.num_classes as f64;
    Ok(p.iter().map(|&pc| (pc - u).powi(2)).sum::<f64>() / cfg.num_classes as f64)
}

fn check_width(width: usize, cfg: &LossConfig) -> Result<()> {
    if width != cfg.num_classes {
        return Err(Error::Loss(format!("expected {} logits, got {width}", cfg.num_classes)));
    }
    Ok(())
}

/// Gradient of [`original_image_loss`] with respect to the logits:
/// `softmax(logits) - onehot(label)`.
pub fn original_image_loss_grad(logits: &[f64], label: usize) -> Vec<f64> {
    let mut g = softmax_unchecked(logits);
    g[label] -= 1.0;
    g
}

/// Gradient of [`blurred_image_loss`] with respect to the logits.
///
/// With `d_c = p_c - u` and `s = sum_c d_c p_c`, the derivative is
/// `(2/C) * p_j * (d_j - s)`.
pub fn blurred_image_loss_grad(logits: &[f64], cfg: &LossConfig) -> Vec<f64> {
    let c = cfg.num_classes as f64;
    let p = softmax_unchecked(logits);
    let u = 1.0 / c;
    let s: f64 = p.iter().map(|&pc| (pc - u) * pc).sum();
    p.iter().map(|&pj| 2.0 / c * pj * ((pj - u) - s)).collect()
}

fn row(logits: &ArrayView2<'_, f64>, i: usize) -> Vec<f64> {
    logits.row(i).to_vec()
}

fn reduce(per_sample: &[f64], reduction: Reduction) -> f64 {
    let sum: f64 = per_sample.iter().sum();
    match reduction {
        Reduction::Sum => sum,
        Reduction::Mean => sum / per_sample.len() as f64,
    }
}

fn validate_batch(logits: &ArrayView2<'_, f64>, labels: &[usize], cfg: &LossConfig) -> Result<()> {
    if logits.nrows() == 0 {
        return Err(Error::Loss("empty batch".into()));
    }
    if logits.nrows() != labels.len() {
        return Err(Error::Loss(format!("{} logit rows but {} labels", logits.nrows(), labels.len())));
    }
    check_width(logits.ncols(), cfg)?;
    if let Some(bad) = labels.iter().find(|&&l| l > cfg.blur_label) {
        return Err(Error::Loss(format!("label {bad} exceeds blur label {}", cfg.blur_label)));
    }
    Ok(())
}

/// Per-sample dispatch between the two branches, reduced over the batch.
pub fn combined_loss(logits: ArrayView2<'_, f64>, labels: &[usize], cfg: &LossConfig) -> Result<LossOutput> {
    validate_batch(&logits, labels, cfg)?;
    let mut per_sample = Vec::with_capacity(labels.len());
    let mut branch_tags = Vec::with_capacity(labels.len());
    for (i, &label) in labels.iter().enumerate() {
        let z = row(&logits, i);
        if label == cfg.blur_label {
            per_sample.push(blurred_image_loss(&z, cfg)?);
            branch_tags.push(Branch::Blurred);
        } else {
            per_sample.push(original_image_loss(&z, label)?);
            branch_tags.push(Branch::Original);
        }
    }
    Ok(LossOutput { total: reduce(&per_sample, cfg.reduction), per_sample, branch_tags })
}

/// Gradient of `combined_loss(...).total` with respect to every logit.
pub fn combined_loss_grad(logits: ArrayView2<'_, f64>, labels: &[usize], cfg: &LossConfig) -> Result<Array2<f64>> {
    validate_batch(&logits, labels, cfg)?;
    let scale = match cfg.reduction {
        Reduction::Mean => 1.0 / labels.len() as f64,
        Reduction::Sum => 1.0,
    };
    let mut grad = Array2::zeros(logits.raw_dim());
    for (i, &label) in labels.iter().enumerate() {
        let z = row(&logits, i);
        let g = if label == cfg.blur_label { blurred_image_loss_grad(&z, cfg) } else { original_image_loss_grad(&z, label) };
        for (dst, v) in grad.row_mut(i).iter_mut().zip(g) {
            *dst = v * scale;
        }
    }
    Ok(grad)
}

/// Plain categorical cross-entropy over all logit columns (mean reduction).
///
/// Used by the loss ablation, where the blurred class gets its own output.
pub fn categorical_cross_entropy(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<LossOutput> {
    if logits.nrows() == 0 || logits.nrows() != labels.len() {
        return Err(Error::Loss("batch/label size mismatch".into()));
    }
    let mut per_sample = Vec::with_capacity(labels.len());
    for (i, &label) in labels.iter().enumerate() {
        per_sample.push(original_image_loss(&row(&logits, i), label)?);
    }
    Ok(LossOutput { total: reduce(&per_sample, Reduction::Mean), per_sample, branch_tags: vec![Branch::Original; labels.len()] })
}

pub fn categorical_cross_entropy_grad(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Array2<f64> {
    let scale = 1.0 / labels.len() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    for (i, &label) in labels.iter().enumerate() {
        let g = original_image_loss_grad(&row(&logits, i), label);
        for (dst, v) in grad.row_mut(i).iter_mut().zip(g) {
            *dst = v * scale;
        }
    }
    grad
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "OI")]
    Original,
    #[serde(rename = "BI")]
    Blurred,
    #[serde(rename = "combined")]
    Combined,
}

/// Maximum relative discrepancy between the analytic logit gradient and
/// central finite differences with step `eps`.
///
/// The relative error of a component is `|a - n| / max(|a|, |n|, 1e-7)`, so
/// components whose true gradient vanishes are compared absolutely.
/// For [`LossKind::Original`] and [`LossKind::Blurred`] every row is scored by
/// that branch alone (`labels` supplies the class for the original branch);
/// [`LossKind::Combined`] uses the batch loss with `cfg.reduction`.
pub fn gradient_check(kind: LossKind, logits: ArrayView2<'_, f64>, labels: &[usize], cfg: &LossConfig, eps: f64) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Loss(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let objective = |z: ArrayView2<'_, f64>| -> Result<f64> {
        match kind {
            LossKind::Combined => combined_loss(z, labels, cfg).map(|o| o.total),
            LossKind::Original => {
                let mut s = 0.0;
                for (i, &l) in labels.iter().enumerate() {
                    s += original_image_loss(&z.row(i).to_vec(), l)?;
                }
                Ok(s)
            }
            LossKind::Blurred => {
                let mut s = 0.0;
                for i in 0..z.nrows() {
                    s += blurred_image_loss(&z.row(i).to_vec(), cfg)?;
                }
                Ok(s)
            }
        }
    };
    let analytic = match kind {
        LossKind::Combined => combined_loss_grad(logits, labels, cfg)?,
        LossKind::Original => {
            let mut g = Array2::zeros(logits.raw_dim());
            for (i, &l) in labels.iter().enumerate() {
                if l >= logits.ncols() {
                    return Err(Error::Loss(format!("label {l} out of range")));
                }
                for (d, v) in g.row_mut(i).iter_mut().zip(original_image_loss_grad(&row(&logits, i), l)) {
                    *d = v;
                }
            }
            g
        }
        LossKind::Blurred => {
            let mut g = Array2::zeros(logits.raw_dim());
            for i in 0..logits.nrows() {
                for (d, v) in g.row_mut(i).iter_mut().zip(blurred_image_loss_grad(&row(&logits, i), cfg)) {
                    *d = v;
                }
            }
            g
        }
    };

    let mut probe = logits.to_owned();
    let mut worst: f64 = 0.0;
    for idx in ndarray::indices(logits.raw_dim()) {
        let orig = probe[idx];
        probe[idx] = orig + eps;
        let plus = objective(probe.view())?;
        probe[idx] = orig - eps;
        let minus = objective(probe.view())?;
        probe[idx] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[idx];
        let denom = a.abs().max(numeric.abs()).max(1e-7);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
