//! Paired baseline / BLDA runs on one synthetic construction.

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{BldaError, Result};
use crate::logit_stats::{distributional_bias, estimate_offline, Domain, GmmBank, LogitBatch, LogitRecord, OfflineFit};
use crate::metrics::{ClassMetrics, Summary};

use super::data::{generate_domains, Domains, LabeledSet};
use super::train::{evaluate, max_abs, predict, train_until, HistoryRow, TrainState, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: Variant,
    pub per_class: Vec<ClassMetrics>,
    pub summary: Summary,
    pub empirical_bias: Vec<f64>,
    pub max_abs_bias: f64,
    /// From a bank fitted offline on the final held-out target logits;
    /// `None` when some cell had too few samples to estimate.
    pub distributional_bias: Option<Vec<f64>>,
    pub history: Vec<HistoryRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub seed: u64,
    pub iterations: usize,
    pub baseline: VariantReport,
    pub blda: VariantReport,
}

/// Predictions of the final students on the held-out target split.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub index: usize,
    pub label: usize,
    pub baseline: usize,
    pub blda: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub bank: GmmBank,
    pub predictions: Vec<PredictionRow>,
}

pub fn train_variant(variant: Variant, cfg: &Config, domains: &Domains) -> Result<TrainState> {
    let mut state = TrainState::new(variant, cfg, domains.source.dim);
    resume(&mut state, cfg, domains, cfg.train.iterations)?;
    Ok(state)
}

/// Continues `state` up to iteration `until`.
pub fn resume(state: &mut TrainState, cfg: &Config, domains: &Domains, until: usize) -> Result<()> {
    train_until(state, &domains.source, &domains.target, &domains.target_eval, cfg, until)
}

fn eval_logit_batch(state: &TrainState, set: &LabeledSet) -> Result<LogitBatch> {
    let records = (0..set.len())
        .map(|i| LogitRecord {
            logits: state.student.logits(set.row(i)),
            label: Some(set.labels[i]),
            domain: Domain::Target,
            quality: 1.0,
        })
        .collect();
    LogitBatch::new(state.student.layout.num_classes, records)
}

pub fn variant_report(state: &TrainState, cfg: &Config, eval: &LabeledSet) -> Result<VariantReport> {
    let (tally, bias) = evaluate(&state.student, eval)?;
    let batch = eval_logit_batch(state, eval)?;
    // Frozen logits: plain warm-started EM, no momentum.
    let em = crate::gmm::EmConfig { momentum: 0.0, ..cfg.em };
    let fit = OfflineFit {
        n_min: cfg.n_min,
        cell_cap: cfg.train.report_cell_cap,
        tol: cfg.train.offline_tol,
        max_epochs: cfg.train.report_epochs,
        seed: cfg.seed,
    };
    let (bank, _) = estimate_offline(&batch, &em, &fit)?;
    let distributional = match distributional_bias(&bank, Domain::Target, cfg.mc_samples, cfg.seed) {
        Ok(b) => Some(b),
        Err(BldaError::UnestimatedCells(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(VariantReport {
        variant: state.variant,
        per_class: tally.per_class(),
        summary: tally.summary(),
        max_abs_bias: max_abs(&bias),
        empirical_bias: bias,
        distributional_bias: distributional,
        history: state.history.clone(),
    })
}

/// Trains both variants from identical seeds and reports on held-out target
/// data.
pub fn run_experiment(cfg: &Config) -> Result<RunOutcome> {
    cfg.validate()?;
    if cfg.train.iterations == 0 {
        return Err(BldaError::Config("iterations must be >= 1".into()));
    }
    let domains = generate_domains(&cfg.domain)?;
    let base = train_variant(Variant::Baseline, cfg, &domains)?;
    let blda = train_variant(Variant::Blda, cfg, &domains)?;
    finish_experiment(cfg, &domains, &base, &blda)
}

/// Builds the outcome from two fully trained states.
pub fn finish_experiment(cfg: &Config, domains: &Domains, base: &TrainState, blda: &TrainState) -> Result<RunOutcome> {
    let eval = &domains.target_eval;
    let report = RunReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        iterations: cfg.train.iterations,
        baseline: variant_report(base, cfg, eval)?,
        blda: variant_report(blda, cfg, eval)?,
    };
    let predictions = predict(&base.student, eval)
        .into_iter()
        .zip(predict(&blda.student, eval))
        .enumerate()
        .map(|(index, (b, a))| PredictionRow {
            index,
            label: eval.labels[index],
            baseline: b,
            blda: a,
        })
        .collect();
    Ok(RunOutcome {
        report,
        bank: blda.bank.clone(),
        predictions,
    })
}
