//! Per-class logit statistics: the C×C logit-set matrix, per-cell GMM banks
//! and the class-bias estimators.
//!
//! Cell `(c, l)` of a [`LogitSetMatrix`] collects the logit for class `l` over
//! all records whose (pseudo-)label is `c`. Diagonal cells are the positive
//! distributions, off-diagonal cells the negative ones.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BldaError, Result};
use crate::gmm::{self, EmConfig, GaussianMixture};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = BldaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(BldaError::Contract(format!("unknown domain {other:?}"))),
        }
    }
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitRecord {
    pub logits: Vec<f64>,
    /// `None` for unlabeled target rows.
    pub label: Option<usize>,
    pub domain: Domain,
    pub quality: f64,
}

impl LogitRecord {
    /// Ground-truth label, or the record's own argmax for unlabeled rows.
    pub fn effective_label(&self) -> usize {
        self.label.unwrap_or_else(|| argmax(&self.logits))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitBatch {
    num_classes: usize,
    records: Vec<LogitRecord>,
}

impl LogitBatch {
    pub fn new(num_classes: usize, records: Vec<LogitRecord>) -> Result<Self> {
        if num_classes == 0 {
            return Err(BldaError::Contract("num_classes must be positive".into()));
        }
        for (i, r) in records.iter().enumerate() {
            if r.logits.len() != num_classes {
                return Err(BldaError::Contract(format!(
                    "record {i} has {} logits, expected {num_classes}",
                    r.logits.len()
                )));
            }
            if let Some(l) = r.label {
                if l >= num_classes {
                    return Err(BldaError::Contract(format!("record {i} label {l} out of range")));
                }
            }
            if !(0.0..=1.0).contains(&r.quality) {
                return Err(BldaError::Contract(format!(
                    "record {i} quality {} outside [0,1]",
                    r.quality
                )));
            }
        }
        Ok(LogitBatch { num_classes, records })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn records(&self) -> &[LogitRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct CellBuffer {
    values: Vec<f64>,
    seen: u64,
}

/// C×C reservoir buffers of scalar logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitSetMatrix {
    num_classes: usize,
    cap: usize,
    cells: Vec<CellBuffer>,
    rng: ChaCha8Rng,
}

impl LogitSetMatrix {
    pub fn new(num_classes: usize, cap: usize, seed: u64) -> Self {
        assert!(cap > 0, "cell cap must be positive");
        LogitSetMatrix {
            num_classes,
            cap,
            cells: vec![CellBuffer::default(); num_classes * num_classes],
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    /// Adds `logits[l]` to cell `(label, l)` for every `l`.
    pub fn push(&mut self, label: usize, logits: &[f64]) -> Result<()> {
        if logits.len() != self.num_classes || label >= self.num_classes {
            return Err(BldaError::Contract(format!(
                "record with {} logits and label {label} for a {}-class matrix",
                logits.len(),
                self.num_classes
            )));
        }
        for (l, &z) in logits.iter().enumerate() {
            let cell = &mut self.cells[label * self.num_classes + l];
            cell.seen += 1;
            if cell.values.len() < self.cap {
                cell.values.push(z);
            } else {
                let j = self.rng.random_range(0..cell.seen);
                if (j as usize) < self.cap {
                    cell.values[j as usize] = z;
                }
            }
        }
        Ok(())
    }

    /// Adds every record of `domain` from `batch`. Target records enter only
    /// with positive quality; unlabeled rows use their argmax as pseudo-label.
    pub fn accumulate(&mut self, batch: &LogitBatch, domain: Domain) -> Result<()> {
        if batch.num_classes() != self.num_classes {
            return Err(BldaError::Contract(format!(
                "batch has {} classes, matrix has {}",
                batch.num_classes(),
                self.num_classes
            )));
        }
        for r in batch.records().iter().filter(|r| r.domain == domain) {
            if domain == Domain::Target && r.quality <= 0.0 {
                continue;
            }
            self.push(r.effective_label(), &r.logits)?;
        }
        Ok(())
    }

    pub fn cell(&self, c: usize, l: usize) -> &[f64] {
        &self.cells[c * self.num_classes + l].values
    }

    /// Number of values ever offered to the cell since it was last drained.
    pub fn seen(&self, c: usize, l: usize) -> u64 {
        self.cells[c * self.num_classes + l].seen
    }

    pub fn drain(&mut self, c: usize, l: usize) {
        let cell = &mut self.cells[c * self.num_classes + l];
        cell.values.clear();
        cell.seen = 0;
    }

    /// Drains exactly the cells that `samples` did not skip.
    pub fn drain_sampled(&mut self, samples: &CellSamples) {
        for c in 0..self.num_classes {
            for l in 0..self.num_classes {
                if samples.get(c, l).is_some() {
                    self.drain(c, l);
                }
            }
        }
    }
}

/// How many logits [`sample_cells`] draws per cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSize {
    /// Smallest nonempty cell size, floored at `n_min`.
    MinCell,
    Fixed(usize),
    /// Every buffered value.
    All,
}

/// Per-cell draws; `None` marks a skipped cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSamples {
    num_classes: usize,
    n_sample: usize,
    cells: Vec<Option<Vec<f64>>>,
}

impl CellSamples {
    pub fn get(&self, c: usize, l: usize) -> Option<&[f64]> {
        self.cells[c * self.num_classes + l].as_deref()
    }

    pub fn n_sample(&self) -> usize {
        self.n_sample
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn skipped(&self) -> usize {
        self.cells.iter().filter(|c| c.is_none()).count()
    }
}

pub fn sample_cells<R: Rng + ?Sized>(
    matrix: &LogitSetMatrix,
    size: SampleSize,
    n_min: usize,
    rng: &mut R,
) -> CellSamples {
    let c2 = matrix.num_classes * matrix.num_classes;
    let n_sample = match size {
        SampleSize::Fixed(n) => n.max(1),
        SampleSize::All => 0,
        SampleSize::MinCell => matrix
            .cells
            .iter()
            .map(|c| c.values.len())
            .filter(|&n| n > 0)
            .min()
            .unwrap_or(0)
            .max(n_min)
            .max(1),
    };
    let cells = (0..c2)
        .map(|i| {
            let buf = &matrix.cells[i].values;
            if buf.is_empty() || buf.len() < n_min {
                return None;
            }
            if size == SampleSize::All {
                return Some(buf.clone());
            }
            if buf.len() >= n_sample {
                Some(index::sample(rng, buf.len(), n_sample).into_iter().map(|j| buf[j]).collect())
            } else {
                Some((0..n_sample).map(|_| buf[rng.random_range(0..buf.len())]).collect())
            }
        })
        .collect();
    CellSamples {
        num_classes: matrix.num_classes,
        n_sample,
        cells,
    }
}

/// C×C mixtures of one domain plus per-cell staleness counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBank {
    cells: Vec<Option<GaussianMixture>>,
    staleness: Vec<u32>,
}

impl DomainBank {
    fn new(num_classes: usize) -> Self {
        DomainBank {
            cells: vec![None; num_classes * num_classes],
            staleness: vec![0; num_classes * num_classes],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmBank {
    num_classes: usize,
    n_min: usize,
    source: DomainBank,
    target: DomainBank,
    anchor_pos: Option<GaussianMixture>,
    anchor_neg: Option<GaussianMixture>,
}

impl GmmBank {
    pub fn new(num_classes: usize, n_min: usize) -> Self {
        GmmBank {
            num_classes,
            n_min,
            source: DomainBank::new(num_classes),
            target: DomainBank::new(num_classes),
            anchor_pos: None,
            anchor_neg: None,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn n_min(&self) -> usize {
        self.n_min
    }

    fn domain(&self, domain: Domain) -> &DomainBank {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    fn domain_mut(&mut self, domain: Domain) -> &mut DomainBank {
        match domain {
            Domain::Source => &mut self.source,
            Domain::Target => &mut self.target,
        }
    }

    pub fn cell(&self, domain: Domain, c: usize, l: usize) -> Option<&GaussianMixture> {
        self.domain(domain).cells[c * self.num_classes + l].as_ref()
    }

    pub fn set_cell(&mut self, domain: Domain, c: usize, l: usize, m: GaussianMixture) {
        let n = self.num_classes;
        let bank = self.domain_mut(domain);
        bank.cells[c * n + l] = Some(m);
        bank.staleness[c * n + l] = 0;
    }

    pub fn staleness(&self, domain: Domain, c: usize, l: usize) -> u32 {
        self.domain(domain).staleness[c * self.num_classes + l]
    }

    pub fn anchor_pos(&self) -> Option<&GaussianMixture> {
        self.anchor_pos.as_ref()
    }

    pub fn anchor_neg(&self) -> Option<&GaussianMixture> {
        self.anchor_neg.as_ref()
    }

    pub fn set_anchors(&mut self, pos: GaussianMixture, neg: GaussianMixture) {
        self.anchor_pos = Some(pos);
        self.anchor_neg = Some(neg);
    }

    /// Cells with no estimate yet, row-major.
    pub fn missing_cells(&self, domain: Domain) -> Vec<(usize, usize)> {
        let n = self.num_classes;
        self.domain(domain)
            .cells
            .iter()
            .enumerate()
            .filter(|(_, m)| m.is_none())
            .map(|(i, _)| (i / n, i % n))
            .collect()
    }

    /// Fits each non-skipped cell warm-started from its current mixture and
    /// merges with momentum `τ̃^(staleness+1)`; skipped cells age by one.
    /// Source updates also refresh the anchors from the pooled diagonal and
    /// off-diagonal draws, always with exponent 1.
    pub fn update(&mut self, domain: Domain, samples: &CellSamples, cfg: &EmConfig) -> Result<()> {
        let n = self.num_classes;
        if samples.num_classes() != n {
            return Err(BldaError::Contract(format!(
                "samples for {} classes, bank has {n}",
                samples.num_classes()
            )));
        }
        let bank = self.domain_mut(domain);
        for c in 0..n {
            for l in 0..n {
                let idx = c * n + l;
                match samples.get(c, l) {
                    Some(draws) => {
                        let exponent = bank.staleness[idx] + 1;
                        let merged = fit_and_merge(bank.cells[idx].as_ref(), draws, cfg, exponent)?;
                        bank.cells[idx] = Some(merged);
                        bank.staleness[idx] = 0;
                    }
                    None => bank.staleness[idx] = bank.staleness[idx].saturating_add(1),
                }
            }
        }

        if domain == Domain::Source {
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            for c in 0..n {
                for l in 0..n {
                    if let Some(draws) = samples.get(c, l) {
                        if c == l {
                            pos.extend_from_slice(draws);
                        } else {
                            neg.extend_from_slice(draws);
                        }
                    }
                }
            }
            if !pos.is_empty() {
                self.anchor_pos = Some(fit_and_merge(self.anchor_pos.as_ref(), &pos, cfg, 1)?);
            }
            if !neg.is_empty() {
                self.anchor_neg = Some(fit_and_merge(self.anchor_neg.as_ref(), &neg, cfg, 1)?);
            }
        }
        Ok(())
    }
}

fn fit_and_merge(
    current: Option<&GaussianMixture>,
    draws: &[f64],
    cfg: &EmConfig,
    exponent: u32,
) -> Result<GaussianMixture> {
    match current {
        Some(old) if old.k() == cfg.k => {
            gmm::em_merge(old, draws, cfg, exponent)
        }
        _ => {
            let init = gmm::init_from_samples(draws, cfg)?;
            gmm::em_fit(&init, draws, cfg)
        }
    }
}

/// Functional form of [`GmmBank::update`].
pub fn update_bank(bank: &GmmBank, domain: Domain, samples: &CellSamples, cfg: &EmConfig) -> Result<GmmBank> {
    let mut next = bank.clone();
    next.update(domain, samples, cfg)?;
    Ok(next)
}

/// Settings for [`estimate_offline`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OfflineFit {
    pub n_min: usize,
    pub cell_cap: usize,
    pub tol: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

/// Fits a bank from a frozen dump: every record is buffered once, then
/// epochs of full-buffer sampling and bank updates run until the largest
/// parameter change falls below `tol`. Returns the bank and the epoch count.
pub fn estimate_offline(batch: &LogitBatch, cfg: &EmConfig, fit: &OfflineFit) -> Result<(GmmBank, usize)> {
    let n = batch.num_classes();
    let mut bank = GmmBank::new(n, fit.n_min);
    let mut source = LogitSetMatrix::new(n, fit.cell_cap, fit.seed);
    let mut target = LogitSetMatrix::new(n, fit.cell_cap, fit.seed.wrapping_add(1));
    source.accumulate(batch, Domain::Source)?;
    target.accumulate(batch, Domain::Target)?;
    let mut rng = ChaCha8Rng::seed_from_u64(fit.seed);
    let source_draws = sample_cells(&source, SampleSize::All, fit.n_min, &mut rng);
    let target_draws = sample_cells(&target, SampleSize::All, fit.n_min, &mut rng);

    let mut epochs = 0;
    while epochs < fit.max_epochs.max(1) {
        let before = bank.clone();
        bank.update(Domain::Source, &source_draws, cfg)?;
        bank.update(Domain::Target, &target_draws, cfg)?;
        epochs += 1;
        if epochs > 1 && bank.max_param_drift(&before) < fit.tol {
            break;
        }
    }
    Ok((bank, epochs))
}

impl GmmBank {
    /// Largest parameter change across all estimated mixtures; a mixture
    /// appearing for the first time counts as infinite drift.
    pub fn max_param_drift(&self, other: &GmmBank) -> f64 {
        let pairs = self
            .source
            .cells
            .iter()
            .zip(&other.source.cells)
            .chain(self.target.cells.iter().zip(&other.target.cells))
            .chain([(&self.anchor_pos, &other.anchor_pos), (&self.anchor_neg, &other.anchor_neg)]);
        pairs
            .map(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => a.max_param_diff(b),
                (None, None) => 0.0,
                _ => f64::INFINITY,
            })
            .fold(0.0, f64::max)
    }
}

/// `(1/C)·Σ_c P(l|c) − 1/C` from a row-stochastic C×C matrix.
pub fn bias_from_conditionals(conditionals: &[Vec<f64>]) -> Vec<f64> {
    let c = conditionals.len();
    let inv = 1.0 / c as f64;
    (0..c)
        .map(|l| conditionals.iter().map(|row| row[l]).sum::<f64>() * inv - inv)
        .collect()
}

/// Empirical bias from paired labels and predictions.
pub fn bias_from_predictions(labels: &[usize], predictions: &[usize], num_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![vec![0u64; num_classes]; num_classes];
    for (&y, &p) in labels.iter().zip(predictions) {
        if y >= num_classes || p >= num_classes {
            return Err(BldaError::Contract(format!("label {y} / prediction {p} out of range")));
        }
        counts[y][p] += 1;
    }
    let mut rows = Vec::with_capacity(num_classes);
    for (class, row) in counts.iter().enumerate() {
        let total: u64 = row.iter().sum();
        if total == 0 {
            return Err(BldaError::MissingClass { class });
        }
        rows.push(row.iter().map(|&n| n as f64 / total as f64).collect());
    }
    Ok(bias_from_conditionals(&rows))
}

/// Bias of argmax predictions over the labeled records of `batch`.
pub fn empirical_bias(batch: &LogitBatch) -> Result<Vec<f64>> {
    let (labels, preds): (Vec<usize>, Vec<usize>) = batch
        .records()
        .iter()
        .filter_map(|r| r.label.map(|y| (y, argmax(&r.logits))))
        .unzip();
    bias_from_predictions(&labels, &preds, batch.num_classes())
}

/// Monte-Carlo estimate of `P(l|c)` under independent cell distributions,
/// row-normalized, then turned into a bias vector.
pub fn distributional_bias(bank: &GmmBank, domain: Domain, mc_samples: usize, seed: u64) -> Result<Vec<f64>> {
    let missing = bank.missing_cells(domain);
    if !missing.is_empty() {
        return Err(BldaError::UnestimatedCells(missing));
    }
    if mc_samples == 0 {
        return Err(BldaError::Contract("mc_samples must be positive".into()));
    }
    let n = bank.num_classes();
    let cell = |c: usize, l: usize| bank.cell(domain, c, l).expect("checked above");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    for c in 0..n {
        let mut row = vec![0.0; n];
        for (l, slot) in row.iter_mut().enumerate() {
            let target = cell(c, l);
            let mut acc = 0.0;
            for _ in 0..mc_samples {
                let z = target.sample(&mut rng);
                let mut prod = 1.0;
                for other in (0..n).filter(|&o| o != l) {
                    prod *= cell(c, other).cdf(z);
                }
                acc += prod;
            }
            *slot = acc / mc_samples as f64;
        }
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter_mut().for_each(|p| *p /= total);
        } else {
            row.iter_mut().for_each(|p| *p = 1.0 / n as f64);
        }
        rows.push(row);
    }
    Ok(bias_from_conditionals(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::{Component, GridSpec};

    fn rec(logits: &[f64], label: usize) -> LogitRecord {
        LogitRecord {
            logits: logits.to_vec(),
            label: Some(label),
            domain: Domain::Source,
            quality: 1.0,
        }
    }

    #[test]
    fn accumulate_unrolls_definition() {
        let mut m = LogitSetMatrix::new(2, 10, 0);
        let batch = LogitBatch::new(2, vec![rec(&[0.3, -1.2], 0)]).unwrap();
        m.accumulate(&batch, Domain::Source).unwrap();
        assert_eq!(m.cell(0, 0), &[0.3]);
        assert_eq!(m.cell(0, 1), &[-1.2]);
        assert!(m.cell(1, 0).is_empty() && m.cell(1, 1).is_empty());

        let batch = LogitBatch::new(2, vec![rec(&[1.0, 2.0], 0)]).unwrap();
        m.accumulate(&batch, Domain::Source).unwrap();
        assert_eq!(m.cell(0, 0).len(), 2);
        assert_eq!(m.cell(0, 1).len(), 2);
    }

    #[test]
    fn accumulate_rejects_dimension_mismatch() {
        let mut m = LogitSetMatrix::new(3, 10, 0);
        let batch = LogitBatch::new(2, vec![rec(&[0.0, 1.0], 1)]).unwrap();
        assert!(m.accumulate(&batch, Domain::Source).is_err());
        assert!(m.push(0, &[1.0]).is_err());
    }

    #[test]
    fn zero_quality_target_rows_are_excluded() {
        let mut m = LogitSetMatrix::new(2, 10, 0);
        let mut r = rec(&[0.0, 1.0], 0);
        r.domain = Domain::Target;
        r.quality = 0.0;
        let mut unlabeled = rec(&[0.0, 1.0], 0);
        unlabeled.domain = Domain::Target;
        unlabeled.label = None;
        let batch = LogitBatch::new(2, vec![r, unlabeled]).unwrap();
        m.accumulate(&batch, Domain::Target).unwrap();
        assert!(m.cell(0, 0).is_empty());
        // argmax pseudo-label of [0, 1] is class 1
        assert_eq!(m.cell(1, 1), &[1.0]);
    }

    #[test]
    fn reservoir_is_capped_and_unbiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut m = LogitSetMatrix::new(2, 100, 5);
        let mut stream = Vec::new();
        for _ in 0..1000 {
            let a: f64 = rng.random_range(-3.0..5.0);
            let b: f64 = rng.random_range(0.0..1.0);
            stream.push(a);
            m.push(0, &[a, b]).unwrap();
        }
        assert_eq!(m.cell(0, 0).len(), 100);
        assert_eq!(m.cell(0, 1).len(), 100);
        let full_mean = stream.iter().sum::<f64>() / stream.len() as f64;
        let full_sd = (stream.iter().map(|x| (x - full_mean).powi(2)).sum::<f64>() / 1000.0).sqrt();
        let res = m.cell(0, 0);
        let res_mean = res.iter().sum::<f64>() / res.len() as f64;
        assert!((res_mean - full_mean).abs() <= 3.0 * full_sd / 10.0);
    }

    #[test]
    fn sampling_counts_and_skips() {
        let mut m = LogitSetMatrix::new(2, 1000, 0);
        for i in 0..200 {
            m.push(0, &[i as f64, -(i as f64)]).unwrap();
            m.push(1, &[i as f64, 2.0 * i as f64]).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_cells(&m, SampleSize::Fixed(100), 100, &mut rng);
        for c in 0..2 {
            for l in 0..2 {
                let draws = s.get(c, l).unwrap();
                assert_eq!(draws.len(), 100);
                assert!(draws.iter().all(|v| m.cell(c, l).contains(v)));
            }
        }

        let mut small = LogitSetMatrix::new(2, 1000, 0);
        for i in 0..50 {
            small.push(0, &[i as f64, 0.0]).unwrap();
        }
        for i in 0..150 {
            small.push(1, &[i as f64, 0.0]).unwrap();
        }
        let s = sample_cells(&small, SampleSize::MinCell, 100, &mut rng);
        assert!(s.get(0, 0).is_none());
        assert_eq!(s.n_sample(), 100);
        assert_eq!(s.get(1, 1).unwrap().len(), 100);
    }

    #[test]
    fn sampling_with_replacement_when_short() {
        let mut m = LogitSetMatrix::new(1, 1000, 0);
        for i in 0..120 {
            m.push(0, &[i as f64]).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = sample_cells(&m, SampleSize::Fixed(300), 100, &mut rng);
        assert_eq!(s.get(0, 0).unwrap().len(), 300);
    }

    fn normal(mean: f64, std: f64) -> GaussianMixture {
        GaussianMixture::new(vec![Component { weight: 1.0, mean, std }], GridSpec::default()).unwrap()
    }

    #[test]
    fn staleness_exponent_and_anchor_policy() {
        let cfg = EmConfig { k: 1, ..EmConfig::default() };
        let mut bank = GmmBank::new(2, 100);
        let mut m = LogitSetMatrix::new(2, 10_000, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..200 {
            let x = (i % 10) as f64;
            m.push(0, &[x, -x]).unwrap();
            m.push(1, &[-x, x]).unwrap();
        }
        let s = sample_cells(&m, SampleSize::Fixed(100), 100, &mut rng);
        bank.update(Domain::Target, &s, &cfg).unwrap();
        assert!(bank.anchor_pos().is_none(), "target updates never touch anchors");
        bank.update(Domain::Source, &s, &cfg).unwrap();
        assert!(bank.anchor_pos().is_some() && bank.anchor_neg().is_some());

        let empty = sample_cells(&LogitSetMatrix::new(2, 10, 0), SampleSize::MinCell, 100, &mut rng);
        for _ in 0..3 {
            bank.update(Domain::Target, &empty, &cfg).unwrap();
        }
        assert_eq!(bank.staleness(Domain::Target, 0, 0), 3);

        // Fresh data far from the current fit: the merged mean must move by 1 - τ̃⁴.
        let before = bank.cell(Domain::Target, 0, 0).unwrap().mean();
        let mut far = LogitSetMatrix::new(2, 10_000, 0);
        for _ in 0..100 {
            far.push(0, &[50.0, 0.0]).unwrap();
            far.push(1, &[0.0, 50.0]).unwrap();
        }
        let s = sample_cells(&far, SampleSize::Fixed(100), 100, &mut rng);
        let fitted_mean = 50.0;
        let anchor_before = bank.anchor_pos().cloned();
        bank.update(Domain::Target, &s, &cfg).unwrap();
        let after = bank.cell(Domain::Target, 0, 0).unwrap().mean();
        let w = 1.0 - 0.99_f64.powi(4);
        assert!((after - ((1.0 - w) * before + w * fitted_mean)).abs() < 1e-9);
        assert_eq!(bank.staleness(Domain::Target, 0, 0), 0);
        assert_eq!(bank.anchor_pos().cloned(), anchor_before);
    }

    #[test]
    fn repeated_samples_converge_monotonically() {
        let cfg = EmConfig { k: 1, momentum: 0.9, ..EmConfig::default() };
        let mut bank = GmmBank::new(1, 10);
        bank.set_cell(Domain::Source, 0, 0, normal(-5.0, 1.0));
        let mut m = LogitSetMatrix::new(1, 1000, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            m.push(0, &[rng.random_range(1.0..3.0)]).unwrap();
        }
        let s = sample_cells(&m, SampleSize::All, 10, &mut rng);
        let target = s.get(0, 0).unwrap().iter().sum::<f64>() / 50.0;
        let mut last = f64::INFINITY;
        for _ in 0..30 {
            bank.update(Domain::Source, &s, &cfg).unwrap();
            let d = (bank.cell(Domain::Source, 0, 0).unwrap().mean() - target).abs();
            assert!(d < last);
            last = d;
        }
    }

    #[test]
    fn empirical_bias_examples() {
        let perfect = LogitBatch::new(3, vec![rec(&[1.0, 0.0, 0.0], 0), rec(&[0.0, 1.0, 0.0], 1), rec(&[0.0, 0.0, 1.0], 2)]).unwrap();
        assert!(empirical_bias(&perfect).unwrap().iter().all(|b| b.abs() < 1e-15));

        let always_one = LogitBatch::new(2, vec![rec(&[0.0, 1.0], 0), rec(&[0.0, 1.0], 1)]).unwrap();
        let b = empirical_bias(&always_one).unwrap();
        assert!((b[0] + 0.5).abs() < 1e-15 && (b[1] - 0.5).abs() < 1e-15);

        let missing = LogitBatch::new(2, vec![rec(&[0.0, 1.0], 0)]).unwrap();
        match empirical_bias(&missing) {
            Err(BldaError::MissingClass { class }) => assert_eq!(class, 1),
            other => panic!("expected missing class, got {other:?}"),
        }
    }

    #[test]
    fn empirical_bias_ties_go_low() {
        let b = LogitBatch::new(2, vec![rec(&[1.0, 1.0], 0), rec(&[1.0, 1.0], 1)]).unwrap();
        assert_eq!(empirical_bias(&b).unwrap(), vec![0.5, -0.5]);
    }

    #[test]
    fn random_scorer_bias_within_binomial_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let c = 4;
        let per_class = 5000;
        let mut recs = Vec::new();
        for y in 0..c {
            for _ in 0..per_class {
                let logits: Vec<f64> = (0..c).map(|_| rng.random()).collect();
                recs.push(rec(&logits, y));
            }
        }
        let bias = empirical_bias(&LogitBatch::new(c, recs).unwrap()).unwrap();
        // Bias(l) is the mean of C independent frequency estimates of p = 1/C.
        let p = 1.0 / c as f64;
        let var = p * (1.0 - p) / per_class as f64 / c as f64;
        for b in bias {
            assert!(b.abs() <= 3.0 * var.sqrt(), "{b}");
        }
    }

    #[test]
    fn distributional_bias_examples() {
        let mut bank = GmmBank::new(3, 100);
        for c in 0..3 {
            for l in 0..3 {
                bank.set_cell(Domain::Source, c, l, normal(0.5, 1.3));
            }
        }
        let b = distributional_bias(&bank, Domain::Source, 20_000, 1).unwrap();
        assert!(b.iter().all(|x| x.abs() < 0.01), "{b:?}");
        assert!(b.iter().sum::<f64>().abs() < 1e-9);

        let mut bank = GmmBank::new(2, 100);
        for c in 0..2 {
            bank.set_cell(Domain::Source, c, 0, normal(-5.0, 0.1));
            bank.set_cell(Domain::Source, c, 1, normal(5.0, 0.1));
        }
        let b = distributional_bias(&bank, Domain::Source, 5_000, 1).unwrap();
        assert!((b[0] + 0.5).abs() < 0.01 && (b[1] - 0.5).abs() < 0.01);

        match distributional_bias(&bank, Domain::Target, 10, 1) {
            Err(BldaError::UnestimatedCells(cells)) => assert_eq!(cells.len(), 4),
            other => panic!("expected unestimated cells, got {other:?}"),
        }
    }
}
