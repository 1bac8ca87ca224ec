//! Margin-softmax family, occlusion-pattern losses and their weighted sum.
//!
//! The functions here evaluate losses on plain tensors. The same kernels
//! back the differentiable graph ops in [`crate::autograd`], so a value
//! computed here and one computed inside a training step agree exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Cosines are clamped into this band before `acos` so that the angular
/// derivative stays finite.
pub const ACOS_CLAMP: f64 = 1e-7;

/// Angular / cosine margins and logit scale of the unified margin loss.
///
/// The target logit becomes `s * (cos(m1 * theta + m2) - m3)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginSpec {
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarginPreset {
    SphereFace,
    ArcFace,
    CosFace,
}

impl std::str::FromStr for MarginPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sphereface" => Ok(MarginPreset::SphereFace),
            "arcface" => Ok(MarginPreset::ArcFace),
            "cosface" => Ok(MarginPreset::CosFace),
            other => Err(Error::config("loss.preset", format!("unknown preset `{other}`"))),
        }
    }
}

impl MarginSpec {
    pub fn sphereface(m1: f64, s: f64) -> Self {
        Self { m1, m2: 0.0, m3: 0.0, s }
    }

    pub fn arcface(m2: f64, s: f64) -> Self {
        Self { m1: 1.0, m2, m3: 0.0, s }
    }

    pub fn cosface(m3: f64, s: f64) -> Self {
        Self { m1: 1.0, m2: 0.0, m3, s }
    }

    /// Default margins for a preset at logit scale `s`.
    pub fn preset(preset: MarginPreset, s: f64) -> Self {
        match preset {
            MarginPreset::SphereFace => Self::sphereface(4.0, s),
            MarginPreset::ArcFace => Self::arcface(0.5, s),
            MarginPreset::CosFace => Self::cosface(0.35, s),
        }
    }

    /// Plain normalized softmax: no margin at all.
    pub fn plain(s: f64) -> Self {
        Self { m1: 1.0, m2: 0.0, m3: 0.0, s }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0 && self.s.is_finite()) {
            return Err(Error::config("loss.s", "scale must be positive"));
        }
        if !(self.m1 == 0.0 || self.m1 >= 1.0) {
            return Err(Error::config("loss.m1", "must be 0 or >= 1"));
        }
        if !(self.m2.is_finite() && self.m3.is_finite()) {
            return Err(Error::config("loss.m2", "margins must be finite"));
        }
        Ok(())
    }

    fn is_identity_angle(&self) -> bool {
        self.m1 == 1.0 && self.m2 == 0.0
    }

    /// Margin-adjusted target cosine and its derivative with respect to the
    /// raw cosine.
    pub fn target<T: Scalar>(&self, cos: T) -> (T, T) {
        let m3 = T::from_f64_lossy(self.m3);
        if self.is_identity_angle() {
            return (cos - m3, T::one());
        }
        let lo = T::from_f64_lossy(-1.0 + ACOS_CLAMP);
        let hi = T::from_f64_lossy(1.0 - ACOS_CLAMP);
        let clamped = cos.max(lo).min(hi);
        let m1 = T::from_f64_lossy(self.m1);
        let m2 = T::from_f64_lossy(self.m2);
        let theta = clamped.acos();
        let arg = m1 * theta + m2;
        let delta = arg.cos() - m3;
        let grad = if cos != clamped {
            T::zero()
        } else {
            m1 * arg.sin() / (T::one() - clamped * clamped).sqrt()
        };
        (delta, grad)
    }
}

/// Negative log-likelihood of the target given the other logits expressed
/// as differences `z_j - z_target`.
///
/// Returns the loss and the softmax probability of every non-target entry;
/// the target probability is `1 - sum(others)`, also returned.
pub(crate) fn nll_from_diffs<T: Scalar>(diffs: &[T]) -> (T, Vec<T>, T) {
    let max = diffs.iter().copied().fold(T::neg_infinity(), T::max);
    if diffs.is_empty() {
        return (T::zero(), Vec::new(), T::one());
    }
    if max <= T::zero() {
        let exps: Vec<T> = diffs.iter().map(|d| d.exp()).collect();
        let sum: T = exps.iter().copied().sum();
        let denom = T::one() + sum;
        let probs = exps.iter().map(|&e| e / denom).collect();
        (sum.ln_1p(), probs, T::one() / denom)
    } else {
        let exps: Vec<T> = diffs.iter().map(|&d| (d - max).exp()).collect();
        let target = (-max).exp();
        let sum: T = target + exps.iter().copied().sum::<T>();
        let probs = exps.iter().map(|&e| e / sum).collect();
        (max + sum.ln(), probs, target / sum)
    }
}

fn check_labels(labels: &[usize], rows: usize, classes: usize, what: &str) -> Result<()> {
    if rows == 0 {
        return Err(Error::invalid(format!("{what}: empty batch")));
    }
    if labels.len() != rows {
        return Err(Error::invalid(format!(
            "{what}: {} labels for {rows} rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!(
            "{what}: label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

fn as_matrix<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [n, m] => Ok((*n, *m)),
        other => Err(Error::invalid(format!("{what}: expected a matrix, got {other:?}"))),
    }
}

/// Per-row loss and gradient with respect to the cosine row.
pub(crate) fn margin_row<T: Scalar>(row: &[T], label: usize, spec: &MarginSpec) -> (T, Vec<T>) {
    let s = T::from_f64_lossy(spec.s);
    let (delta, ddelta) = spec.target(row[label]);
    let diffs: Vec<T> = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label)
        .map(|(_, &c)| s * (c - delta))
        .collect();
    let (loss, probs, p_target) = nll_from_diffs(&diffs);
    let mut grad = vec![T::zero(); row.len()];
    let mut others = probs.into_iter();
    for (j, g) in grad.iter_mut().enumerate() {
        if j == label {
            *g = (p_target - T::one()) * s * ddelta;
        } else {
            *g = others.next().expect("one prob per non-target class") * s;
        }
    }
    (loss, grad)
}

pub(crate) fn softmax_ce_row<T: Scalar>(row: &[T], label: usize) -> (T, Vec<T>) {
    let zy = row[label];
    let diffs: Vec<T> = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label)
        .map(|(_, &z)| z - zy)
        .collect();
    let (loss, probs, p_target) = nll_from_diffs(&diffs);
    let mut grad = vec![T::zero(); row.len()];
    let mut others = probs.into_iter();
    for (j, g) in grad.iter_mut().enumerate() {
        *g = if j == label {
            p_target - T::one()
        } else {
            others.next().expect("one prob per non-target class")
        };
    }
    (loss, grad)
}

/// Mean unified margin loss over a batch of cosine logits (`N x classes`).
pub fn margin_loss<T: Scalar>(cos: &Tensor<T>, labels: &[usize], spec: &MarginSpec) -> Result<T> {
    spec.validate()?;
    let (n, m) = as_matrix(cos, "margin_loss")?;
    check_labels(labels, n, m, "margin_loss")?;
    let total: T = cos
        .data()
        .chunks(m)
        .zip(labels)
        .map(|(row, &y)| margin_row(row, y, spec).0)
        .sum();
    Ok(total / T::from_usize(n).unwrap())
}

/// Mean softmax cross-entropy of pattern logits (`N x P`).
pub fn pattern_ce_loss<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let (n, p) = as_matrix(logits, "pattern_ce_loss")?;
    check_labels(labels, n, p, "pattern_ce_loss")?;
    let total: T = logits
        .data()
        .chunks(p)
        .zip(labels)
        .map(|(row, &y)| softmax_ce_row(row, y).0)
        .sum();
    Ok(total / T::from_usize(n).unwrap())
}

/// Mean Euclidean distance between predicted and target normalized boxes.
pub fn pattern_reg_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(Error::invalid(format!(
            "pattern_reg_loss: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let (n, w) = as_matrix(pred, "pattern_reg_loss")?;
    if n == 0 {
        return Err(Error::invalid("pattern_reg_loss: empty batch"));
    }
    let total: T = pred
        .data()
        .chunks(w)
        .zip(target.data().chunks(w))
        .map(|(p, t)| {
            p.iter()
                .zip(t)
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<T>()
                .sqrt()
        })
        .sum();
    Ok(total / T::from_usize(n).unwrap())
}

/// Recognition loss plus weighted pattern loss.
pub fn total_loss<T: Scalar>(l_margin: T, l_pred: T, lambda: T) -> Result<T> {
    if lambda < T::zero() || lambda.is_nan() {
        return Err(Error::invalid("total_loss: lambda must be >= 0"));
    }
    if lambda == T::zero() {
        return Ok(l_margin);
    }
    Ok(l_margin + lambda * l_pred)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosface_scalar_example() {
        let cos = Tensor::from_vec(&[1, 2], vec![0.9f64, 0.1]);
        let loss = margin_loss(&cos, &[0], &MarginSpec::cosface(0.35, 64.0)).unwrap();
        // Same arithmetic on the same rounded inputs.
        let direct = (64.0 * (0.1f64 - (0.9 - 0.35))).exp().ln_1p();
        assert!(((loss - direct) / direct).abs() < 1e-15, "{loss} vs {direct}");
        // 0.9, 0.1 and 0.35 are not representable, so the logit gap is
        // -28.8 only to within one ulp of 28.8.
        let literal = (-28.8f64).exp().ln_1p();
        assert!(((loss - literal) / literal).abs() < 4e-15, "{loss} vs {literal}");
        assert!((loss - 3.1068e-13).abs() < 1e-17);
    }

    #[test]
    fn arcface_zero_angle_uses_cos_margin() {
        let spec = MarginSpec::arcface(0.5, 1.0);
        let (delta, _) = spec.target(1.0f64);
        // Clamping moves theta off zero by ~sqrt(2e-7).
        assert!((delta - 0.5f64.cos()).abs() < 3e-4);
        let (delta, _) = spec.target(0.0f64);
        assert!((delta - (std::f64::consts::FRAC_PI_2 + 0.5).cos()).abs() < 1e-12);
    }

    #[test]
    fn plain_spec_is_softmax_ce() {
        let cos = Tensor::from_vec(&[2, 3], vec![0.2f64, -0.4, 0.7, 0.0, 0.3, -0.9]);
        let a = margin_loss(&cos, &[2, 0], &MarginSpec::plain(1.0)).unwrap();
        let b = pattern_ce_loss(&cos, &[2, 0]).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn uniform_pattern_logits() {
        let logits = Tensor::<f64>::zeros(&[3, 226]);
        let loss = pattern_ce_loss(&logits, &[0, 17, 225]).unwrap();
        assert!((loss - 226f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn one_hot_limit_goes_to_zero() {
        let mut last = f64::INFINITY;
        for gap in [1.0, 5.0, 20.0, 80.0] {
            let mut data = vec![0.0f64; 10];
            data[3] = gap;
            let loss = pattern_ce_loss(&Tensor::from_vec(&[1, 10], data), &[3]).unwrap();
            assert!(loss >= 0.0 && loss < last);
            last = loss;
        }
        assert!(last < 1e-30);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let logits = Tensor::<f64>::zeros(&[1, 4]);
        assert!(matches!(
            pattern_ce_loss(&logits, &[4]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn empty_batch_rejected() {
        let cos = Tensor::<f64>::zeros(&[0, 4]);
        assert!(margin_loss(&cos, &[], &MarginSpec::cosface(0.35, 30.0)).is_err());
    }

    #[test]
    fn regression_three_four_five() {
        let pred = Tensor::from_vec(&[2, 4], vec![0.3f64, 0.0, 0.4, 0.0, 0.1, 0.2, 0.3, 0.4]);
        let target = Tensor::from_vec(&[2, 4], vec![0.0f64, 0.0, 0.0, 0.0, 0.1, 0.2, 0.3, 0.4]);
        // mean of 0.5 and 0.
        assert!((pattern_reg_loss(&pred, &target).unwrap() - 0.25).abs() < 1e-15);
        let one = Tensor::from_vec(&[1, 4], vec![0.3f64, 0.0, 0.4, 0.0]);
        let zero = Tensor::<f64>::zeros(&[1, 4]);
        assert!((pattern_reg_loss(&one, &zero).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(pattern_reg_loss(&one, &one).unwrap(), 0.0);
        assert!(pattern_reg_loss(&one, &Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(2.0f64, 3.0, 1.0).unwrap(), 5.0);
        assert_eq!(total_loss(2.5f64, f64::NAN, 0.0).unwrap(), 2.5);
        assert_eq!(total_loss(2.0f64, 3.0, 0.5).unwrap(), 3.5);
        assert!(total_loss(2.0f64, 3.0, -0.1).is_err());
    }

    #[test]
    fn preset_parsing() {
        assert_eq!("CosFace".parse::<MarginPreset>().unwrap(), MarginPreset::CosFace);
        assert!("triplet".parse::<MarginPreset>().is_err());
        let spec = MarginSpec::preset(MarginPreset::ArcFace, 30.0);
        assert_eq!((spec.m1, spec.m2, spec.m3), (1.0, 0.5, 0.0));
    }
}
