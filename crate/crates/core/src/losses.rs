//! Cross-entropy variants and their logit gradients.
//!
//! Offsets enter the adjusted losses as constants of the backward pass: they
//! are evaluated at the forward logits and never differentiated.

use serde::{Deserialize, Serialize};

use crate::align::LogitOffsets;
use crate::error::{BldaError, Result};
use crate::logit_stats::{Domain, GmmBank};

/// Confidence-to-weight rule for pseudo-labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum QualityRule {
    Threshold { p_thr: f64 },
    Linear,
}

impl Default for QualityRule {
    fn default() -> Self {
        QualityRule::Threshold { p_thr: 0.9 }
    }
}

impl QualityRule {
    pub fn weight(&self, confidence: f64) -> f64 {
        match *self {
            QualityRule::Threshold { p_thr } => {
                if confidence >= p_thr {
                    1.0
                } else {
                    0.0
                }
            }
            QualityRule::Linear => confidence.clamp(0.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda: f64,
    pub quality: QualityRule,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.1,
            lambda: 0.2,
            quality: QualityRule::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0) || !(self.lambda >= 0.0) {
            return Err(BldaError::Config("tau and lambda must be non-negative".into()));
        }
        if let QualityRule::Threshold { p_thr } = self.quality {
            if !(p_thr > 0.0 && p_thr <= 1.0) {
                return Err(BldaError::Config("p_thr must lie in (0, 1]".into()));
            }
        }
        Ok(())
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= s);
    out
}

/// `−log softmax(a)[y]` and `softmax(a) − e_y`.
///
/// When `y` is the argmax the loss is computed as `ln_1p` of the remaining
/// mass so that tiny losses keep full relative precision.
fn ce_from_adjusted(adjusted: &[f64], label: usize) -> (f64, Vec<f64>) {
    let ay = adjusted[label];
    let max = adjusted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let loss = if ay >= max {
        let rest: f64 = adjusted
            .iter()
            .enumerate()
            .filter(|&(c, _)| c != label)
            .map(|(_, &a)| (a - ay).exp())
            .sum();
        rest.ln_1p()
    } else {
        adjusted.iter().map(|a| (a - max).exp()).sum::<f64>().ln() + (max - ay)
    };
    let mut grad = softmax(adjusted);
    grad[label] -= 1.0;
    (loss, grad)
}

fn check_label(logits: &[f64], label: usize) {
    assert!(label < logits.len(), "label {label} out of range for {} logits", logits.len());
}

pub fn ce_loss(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    check_label(logits, label);
    ce_from_adjusted(logits, label)
}

/// Logits shifted by `−τ·Δ_{label,c}(z_c)`.
pub fn adjusted_logits<O: LogitOffsets + ?Sized>(logits: &[f64], label: usize, offsets: &O, tau: f64) -> Vec<f64> {
    logits
        .iter()
        .enumerate()
        .map(|(c, &z)| z - tau * offsets.delta(label, c, z))
        .collect()
}

/// Cross-entropy on `z_c − τ·Δ_{label,c}(z_c)`; the gradient is taken at the
/// unadjusted coordinates with Δ held fixed.
pub fn adjusted_ce_loss<O: LogitOffsets + ?Sized>(
    logits: &[f64],
    label: usize,
    offsets: &O,
    tau: f64,
) -> (f64, Vec<f64>) {
    check_label(logits, label);
    ce_from_adjusted(&adjusted_logits(logits, label, offsets, tau), label)
}

/// `log(1 + Σ_{c≠y} (e^{Δ_yy}/e^{Δ_yc})^τ · e^{z_c − z_y})`, the
/// adaptive-margin reading of [`adjusted_ce_loss`].
pub fn margin_form_loss<O: LogitOffsets + ?Sized>(logits: &[f64], label: usize, offsets: &O, tau: f64) -> f64 {
    check_label(logits, label);
    let zy = logits[label];
    let dyy = offsets.delta(label, label, zy);
    let sum: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != label)
        .map(|(c, &zc)| {
            let ratio = dyy.exp() / offsets.delta(label, c, zc).exp();
            ratio.powf(tau) * (zc - zy).exp()
        })
        .sum();
    sum.ln_1p()
}

/// Quality-weighted adjusted loss for a pseudo-labeled target sample.
pub fn target_loss<O: LogitOffsets + ?Sized>(
    logits: &[f64],
    pseudo_label: usize,
    confidence: f64,
    offsets: &O,
    cfg: &LossConfig,
) -> (f64, Vec<f64>) {
    let q = cfg.quality.weight(confidence);
    if q == 0.0 {
        return (0.0, vec![0.0; logits.len()]);
    }
    let (loss, mut grad) = adjusted_ce_loss(logits, pseudo_label, offsets, cfg.tau);
    grad.iter_mut().for_each(|g| *g *= q);
    (q * loss, grad)
}

/// Positive-distribution CDF of the sample's own-class logit.
pub fn cde_target(logits: &[f64], label: usize, bank: &GmmBank, domain: Domain) -> Result<f64> {
    let cell = bank
        .cell(domain, label, label)
        .ok_or_else(|| BldaError::UnestimatedCells(vec![(label, label)]))?;
    Ok(cell.cdf(logits[label]))
}

/// `q·(pred − target)²` and its derivative in `pred`.
pub fn cde_regression_loss(predicted: f64, target: f64, q: f64) -> (f64, f64) {
    let d = predicted - target;
    (q * d * d, 2.0 * q * d)
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::ZeroOffsets;

    struct RowShift(Vec<f64>);

    impl LogitOffsets for RowShift {
        fn num_classes(&self) -> usize {
            self.0.len()
        }
        fn delta(&self, _row: usize, col: usize, _z: f64) -> f64 {
            self.0[col]
        }
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let (loss, grad) = ce_loss(&[0.7; 4], 2);
        assert!((loss - 4.0_f64.ln()).abs() < 1e-9);
        assert!((grad.iter().sum::<f64>()).abs() < 1e-15);
    }

    #[test]
    fn saturated_logits_give_tiny_loss() {
        let (loss, _) = ce_loss(&[0.0, 30.0, 0.0], 1);
        assert!(loss <= 1e-9 && loss > 0.0);
    }

    #[test]
    fn zero_tau_and_zero_offsets_reduce_to_ce() {
        let z = [0.3, -1.2, 2.5, 0.0];
        let shift = RowShift(vec![0.5, -2.0, 1.0, 0.3]);
        assert_eq!(adjusted_ce_loss(&z, 1, &shift, 0.0), ce_loss(&z, 1));
        assert_eq!(adjusted_ce_loss(&z, 1, &ZeroOffsets(4), 0.7), ce_loss(&z, 1));
        let (ce, _) = ce_loss(&z, 3);
        assert!((margin_form_loss(&z, 3, &ZeroOffsets(4), 1.0) - ce).abs() <= 1e-12 * ce);
    }

    #[test]
    fn margin_ratio_direction() {
        let z = [0.2, 1.0, -0.4];
        let (ce, _) = ce_loss(&z, 0);
        // over-predicted label: Δ_yy below every Δ_yc
        let over = RowShift(vec![-1.0, 0.5, 0.2]);
        assert!(margin_form_loss(&z, 0, &over, 0.5) < ce);
        // under-predicted label: Δ_yy above every Δ_yc
        let under = RowShift(vec![1.0, 0.5, 0.2]);
        assert!(adjusted_ce_loss(&z, 0, &under, 0.5).0 >= ce);
    }

    #[test]
    fn target_loss_quality_gating() {
        let z = [0.1, 0.9, -0.3];
        let off = RowShift(vec![0.2, -0.1, 0.0]);
        let cfg = LossConfig::default();
        let (l, g) = target_loss(&z, 1, 0.5, &off, &cfg);
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
        assert_eq!(target_loss(&z, 1, 0.95, &off, &cfg), adjusted_ce_loss(&z, 1, &off, cfg.tau));

        let lin = LossConfig { quality: QualityRule::Linear, ..cfg };
        let (base, _) = adjusted_ce_loss(&z, 1, &off, cfg.tau);
        for p in [0.1, 0.4, 0.8] {
            assert!((target_loss(&z, 1, p, &off, &lin).0 - p * base).abs() < 1e-15);
        }
    }

    #[test]
    fn regression_loss_examples() {
        assert_eq!(cde_regression_loss(0.4, 0.4, 1.0), (0.0, 0.0));
        let (l, g) = cde_regression_loss(0.8, 0.3, 1.0);
        assert!((l - 0.25).abs() < 1e-12 && (g - 1.0).abs() < 1e-12);
        assert_eq!(cde_regression_loss(0.8, 0.3, 0.0), (0.0, 0.0));
    }

    #[test]
    fn cde_target_queries_positive_cell() {
        use crate::gmm::GaussianMixture;
        let mut bank = GmmBank::new(2, 100);
        assert!(cde_target(&[0.0, 0.0], 1, &bank, Domain::Source).is_err());
        let cell = GaussianMixture::single(2.0, 0.5).unwrap();
        let median = cell.inverse_cdf(0.5).unwrap();
        bank.set_cell(Domain::Source, 1, 1, cell);
        let d = cde_target(&[0.0, median], 1, &bank, Domain::Source).unwrap();
        assert!((d - 0.5).abs() < 1e-3);
        assert!(cde_target(&[0.0, -10.0], 1, &bank, Domain::Source).unwrap() <= 1e-3);
        let lo = cde_target(&[0.0, 1.9], 1, &bank, Domain::Source).unwrap();
        let hi = cde_target(&[0.0, 2.1], 1, &bank, Domain::Source).unwrap();
        assert!(lo < hi);
    }

    #[test]
    fn compensated_sum_beats_naive() {
        let mut s = CompensatedSum::default();
        s.add(1e16);
        s.add(1.0);
        s.add(-1e16);
        assert_eq!(s.value(), 1.0);
    }
}
