//! Confusion-matrix accounting: per-class IoU / accuracy and their means.
//!
//! [`ExactTally`] repeats the computation over big rationals, which is what
//! the class-count scaling checks need: mean accuracy is exactly invariant to
//! per-class count scaling while mean IoU is not.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{BldaError, Result};

/// `counts[c][l]` = samples of true class `c` predicted as `l`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalTally {
    num_classes: usize,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    /// `None` when the class has no true samples.
    pub acc: Option<f64>,
    /// `None` when the class is neither present nor predicted.
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub miou: f64,
    pub macc: f64,
    pub std_iou: f64,
    pub std_acc: f64,
    /// Classes left out of the accuracy mean.
    pub undefined_acc: usize,
    /// Classes left out of the IoU mean.
    pub undefined_iou: usize,
}

impl EvalTally {
    pub fn new(num_classes: usize) -> Self {
        EvalTally {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(BldaError::Contract("tally rows must form a square matrix".into()));
        }
        Ok(EvalTally {
            num_classes: n,
            counts: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn from_predictions(labels: &[usize], predictions: &[usize], num_classes: usize) -> Result<Self> {
        let mut t = EvalTally::new(num_classes);
        for (&y, &p) in labels.iter().zip(predictions) {
            t.record(y, p)?;
        }
        Ok(t)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.num_classes || predicted >= self.num_classes {
            return Err(BldaError::Contract(format!(
                "class pair ({truth},{predicted}) out of range"
            )));
        }
        self.counts[truth * self.num_classes + predicted] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.num_classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Entrywise sum; shards merge in any order.
    pub fn merge(&mut self, other: &EvalTally) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(BldaError::Contract("cannot merge tallies of different sizes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.num_classes).map(|r| r.to_vec()).collect()
    }

    pub fn per_class(&self) -> Vec<ClassMetrics> {
        let n = self.num_classes;
        (0..n)
            .map(|c| {
                let tp = self.get(c, c) as f64;
                let row: u64 = (0..n).map(|l| self.get(c, l)).sum();
                let col: u64 = (0..n).map(|j| self.get(j, c)).sum();
                let union = row + col - self.get(c, c);
                ClassMetrics {
                    acc: (row > 0).then(|| tp / row as f64),
                    iou: (union > 0).then(|| tp / union as f64),
                }
            })
            .collect()
    }

    pub fn summary(&self) -> Summary {
        let per = self.per_class();
        let accs: Vec<f64> = per.iter().filter_map(|m| m.acc).collect();
        let ious: Vec<f64> = per.iter().filter_map(|m| m.iou).collect();
        let (macc, std_acc) = mean_std(&accs);
        let (miou, std_iou) = mean_std(&ious);
        Summary {
            miou,
            macc,
            std_iou,
            std_acc,
            undefined_acc: per.len() - accs.len(),
            undefined_iou: per.len() - ious.len(),
        }
    }

    /// Row `c` times `factors[c]`, rounded; nonzero entries stay ≥ 1.
    pub fn scale_class_counts(&self, factors: &[f64]) -> Result<EvalTally> {
        if factors.len() != self.num_classes || factors.iter().any(|f| !(*f > 0.0)) {
            return Err(BldaError::Contract("need one positive factor per class".into()));
        }
        let n = self.num_classes;
        let counts = self
            .counts
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v == 0 {
                    0
                } else {
                    ((v as f64 * factors[i / n]).round() as u64).max(1)
                }
            })
            .collect();
        Ok(EvalTally { num_classes: n, counts })
    }
}

/// Mean and population standard deviation; `(0, 0)` for an empty slice.
fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Tally with rational entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactTally {
    num_classes: usize,
    counts: Vec<BigRational>,
}

impl From<&EvalTally> for ExactTally {
    fn from(t: &EvalTally) -> Self {
        ExactTally {
            num_classes: t.num_classes,
            counts: t
                .counts
                .iter()
                .map(|&v| BigRational::from_integer(BigInt::from(v)))
                .collect(),
        }
    }
}

impl ExactTally {
    fn get(&self, c: usize, l: usize) -> &BigRational {
        &self.counts[c * self.num_classes + l]
    }

    /// Exact per-class count scaling.
    pub fn scale_class_counts(&self, factors: &[BigRational]) -> Result<ExactTally> {
        if factors.len() != self.num_classes || factors.iter().any(|f| f <= &BigRational::zero()) {
            return Err(BldaError::Contract("need one positive factor per class".into()));
        }
        let n = self.num_classes;
        Ok(ExactTally {
            num_classes: n,
            counts: self
                .counts
                .iter()
                .enumerate()
                .map(|(i, v)| v * &factors[i / n])
                .collect(),
        })
    }

    fn per_class(&self) -> Vec<(Option<BigRational>, Option<BigRational>)> {
        let n = self.num_classes;
        (0..n)
            .map(|c| {
                let tp = self.get(c, c).clone();
                let row: BigRational = (0..n).map(|l| self.get(c, l)).sum();
                let col: BigRational = (0..n).map(|j| self.get(j, c)).sum();
                let union = &row + &col - &tp;
                let acc = (!row.is_zero()).then(|| &tp / &row);
                let iou = (!union.is_zero()).then(|| &tp / &union);
                (acc, iou)
            })
            .collect()
    }

    pub fn macc(&self) -> BigRational {
        rational_mean(self.per_class().into_iter().filter_map(|(a, _)| a).collect())
    }

    pub fn miou(&self) -> BigRational {
        rational_mean(self.per_class().into_iter().filter_map(|(_, i)| i).collect())
    }
}

fn rational_mean(values: Vec<BigRational>) -> BigRational {
    if values.is_empty() {
        return BigRational::zero();
    }
    let n = BigRational::from_integer(BigInt::from(values.len()));
    values.into_iter().sum::<BigRational>() / n
}

pub fn rational_to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}
