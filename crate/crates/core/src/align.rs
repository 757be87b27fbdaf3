//! Quantile-mapping offsets `Δ_cl(z) = F_a⁻¹(F_cl(z)) − z` against the
//! shared anchor distributions, and the post-hoc balanced argmax.

use serde::{Deserialize, Serialize};

use crate::error::{BldaError, Result};
use crate::gmm::GaussianMixture;
use crate::logit_stats::{Domain, GmmBank};

/// Anything that can answer `Δ_{row,col}(z)`.
pub trait LogitOffsets {
    fn num_classes(&self) -> usize;
    fn delta(&self, row: usize, col: usize, z: f64) -> f64;
}

/// The identity adjustment.
#[derive(Debug, Clone, Copy)]
pub struct ZeroOffsets(pub usize);

impl LogitOffsets for ZeroOffsets {
    fn num_classes(&self) -> usize {
        self.0
    }

    fn delta(&self, _row: usize, _col: usize, _z: f64) -> f64 {
        0.0
    }
}

/// Δ tabulated on a uniform z-grid; clamps to the endpoint offsets outside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetTable {
    lo: f64,
    step: f64,
    deltas: Vec<f64>,
}

impl OffsetTable {
    /// Tabulates the quantile map from `cell` onto `anchor` at the cell's
    /// own grid points, reusing the cached CDF values.
    pub fn between(cell: &GaussianMixture, anchor: &GaussianMixture) -> Self {
        let mut mapped = Vec::with_capacity(cell.grid_cdf().len());
        anchor.quantiles_sorted(cell.grid_cdf(), &mut mapped);
        let deltas = mapped
            .iter()
            .enumerate()
            .map(|(i, &zp)| zp - cell.grid_z(i))
            .collect();
        OffsetTable {
            lo: cell.grid_range().0,
            step: cell.grid_step(),
            deltas,
        }
    }

    #[inline]
    pub fn eval(&self, z: f64) -> f64 {
        let last = self.deltas.len() - 1;
        let t = (z - self.lo) / self.step;
        if !(t > 0.0) {
            return self.deltas[0];
        }
        if t >= last as f64 {
            return self.deltas[last];
        }
        let i = t as usize;
        let frac = t - i as f64;
        self.deltas[i] + frac * (self.deltas[i + 1] - self.deltas[i])
    }

    pub fn range(&self) -> (f64, f64) {
        (self.lo, self.lo + self.step * (self.deltas.len() - 1) as f64)
    }
}

/// Offsets for every `(c, l)` cell of one domain. Cells with no estimate
/// yet contribute a zero offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetEvaluator {
    num_classes: usize,
    tables: Vec<Option<OffsetTable>>,
}

impl OffsetEvaluator {
    pub fn zero(num_classes: usize) -> Self {
        OffsetEvaluator {
            num_classes,
            tables: vec![None; num_classes * num_classes],
        }
    }

    pub fn table(&self, row: usize, col: usize) -> Option<&OffsetTable> {
        self.tables[row * self.num_classes + col].as_ref()
    }

    pub fn estimated_cells(&self) -> usize {
        self.tables.iter().filter(|t| t.is_some()).count()
    }
}

impl LogitOffsets for OffsetEvaluator {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    #[inline]
    fn delta(&self, row: usize, col: usize, z: f64) -> f64 {
        match &self.tables[row * self.num_classes + col] {
            Some(t) => t.eval(z),
            None => 0.0,
        }
    }
}

/// Diagonal cells map through the positive anchor, off-diagonal cells
/// through the negative one.
pub fn build_offsets(bank: &GmmBank, domain: Domain) -> Result<OffsetEvaluator> {
    let (pos, neg) = match (bank.anchor_pos(), bank.anchor_neg()) {
        (Some(p), Some(n)) => (p, n),
        _ => return Err(BldaError::MissingAnchors),
    };
    let n = bank.num_classes();
    let mut tables = Vec::with_capacity(n * n);
    for c in 0..n {
        for l in 0..n {
            let anchor = if c == l { pos } else { neg };
            tables.push(bank.cell(domain, c, l).map(|cell| OffsetTable::between(cell, anchor)));
        }
    }
    Ok(OffsetEvaluator { num_classes: n, tables })
}

/// Balanced prediction under a uniform class prior: for each candidate `c`
/// the adjusted logits `z_c' + τ·Δ_{c,c'}(z_c')` are soft-maxed and the
/// candidate's own probability is scored. Ties go to the lower index.
pub fn post_hoc_predict<O: LogitOffsets + ?Sized>(logits: &[f64], offsets: &O, tau: f64) -> Result<usize> {
    let n = offsets.num_classes();
    if logits.len() != n {
        return Err(BldaError::Contract(format!(
            "{} logits for {n}-class offsets",
            logits.len()
        )));
    }
    if tau == 0.0 {
        // Every candidate shares one normalizer, so the score order is the logit order.
        return Ok(crate::logit_stats::argmax(logits));
    }
    let mut adjusted = vec![0.0; n];
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for c in 0..n {
        for (c2, (slot, &z)) in adjusted.iter_mut().zip(logits).enumerate() {
            *slot = z + tau * offsets.delta(c, c2, z);
        }
        let max = adjusted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + adjusted.iter().map(|a| (a - max).exp()).sum::<f64>().ln();
        let score = adjusted[c] - lse;
        if score > best_score {
            best_score = score;
            best = c;
        }
    }
    Ok(best)
}
