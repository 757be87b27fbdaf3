//! JSON report and bank files.

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{BldaError, Result};
use crate::logit_stats::{argmax, distributional_bias, empirical_bias, Domain, GmmBank, LogitBatch, LogitRecord};
use crate::metrics::{ClassMetrics, EvalTally, Summary};
use crate::toyuda::RunReport;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(cfg: &Config) -> Self {
        Provenance {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasSign {
    Over,
    Under,
    Balanced,
}

impl BiasSign {
    pub fn of(bias: f64) -> Self {
        if bias > 0.0 {
            BiasSign::Over
        } else if bias < 0.0 {
            BiasSign::Under
        } else {
            BiasSign::Balanced
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub row: usize,
    pub col: usize,
    pub mean: f64,
    pub std: f64,
    pub staleness: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentSummary {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankSummary {
    pub num_classes: usize,
    pub source: Vec<CellSummary>,
    pub target: Vec<CellSummary>,
    pub anchor_pos: Option<MomentSummary>,
    pub anchor_neg: Option<MomentSummary>,
}

impl BankSummary {
    pub fn of(bank: &GmmBank) -> Self {
        let n = bank.num_classes();
        let cells = |d: Domain| {
            (0..n * n)
                .filter_map(|i| {
                    let (row, col) = (i / n, i % n);
                    bank.cell(d, row, col).map(|m| CellSummary {
                        row,
                        col,
                        mean: m.mean(),
                        std: m.std(),
                        staleness: bank.staleness(d, row, col),
                    })
                })
                .collect()
        };
        let moments = |m: Option<&crate::gmm::GaussianMixture>| {
            m.map(|m| MomentSummary {
                mean: m.mean(),
                std: m.std(),
            })
        };
        BankSummary {
            num_classes: n,
            source: cells(Domain::Source),
            target: cells(Domain::Target),
            anchor_pos: moments(bank.anchor_pos()),
            anchor_neg: moments(bank.anchor_neg()),
        }
    }
}

/// Bias audit of one domain's labeled records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainAudit {
    pub domain: Domain,
    pub records: usize,
    pub empirical_bias: Vec<f64>,
    pub signs: Vec<BiasSign>,
    /// `None` when the bank lacks some cell of this domain.
    pub distributional_bias: Option<Vec<f64>>,
    pub missing_cells: Vec<(usize, usize)>,
    pub per_class: Vec<ClassMetrics>,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub provenance: Provenance,
    pub num_classes: usize,
    pub domains: Vec<DomainAudit>,
    pub bank: BankSummary,
}

/// Audits every domain of `batch` that has labeled records.
pub fn audit(batch: &LogitBatch, bank: &GmmBank, cfg: &Config) -> Result<BiasReport> {
    let n = batch.num_classes();
    if bank.num_classes() != n {
        return Err(BldaError::Contract(format!(
            "dump has {n} classes, bank has {}",
            bank.num_classes()
        )));
    }
    let mut domains = Vec::new();
    for domain in [Domain::Source, Domain::Target] {
        let labeled: Vec<LogitRecord> = batch
            .records()
            .iter()
            .filter(|r| r.domain == domain && r.label.is_some())
            .cloned()
            .collect();
        if labeled.is_empty() {
            continue;
        }
        let records = labeled.len();
        let (labels, preds): (Vec<usize>, Vec<usize>) = labeled
            .iter()
            .map(|r| (r.label.expect("filtered"), argmax(&r.logits)))
            .unzip();
        let tally = EvalTally::from_predictions(&labels, &preds, n)?;
        let empirical = empirical_bias(&LogitBatch::new(n, labeled)?)?;
        let missing_cells = bank.missing_cells(domain);
        let distributional = if missing_cells.is_empty() {
            Some(distributional_bias(bank, domain, cfg.mc_samples, cfg.seed)?)
        } else {
            None
        };
        domains.push(DomainAudit {
            domain,
            records,
            signs: empirical.iter().map(|&b| BiasSign::of(b)).collect(),
            empirical_bias: empirical,
            distributional_bias: distributional,
            missing_cells,
            per_class: tally.per_class(),
            summary: tally.summary(),
        });
    }
    if domains.is_empty() {
        return Err(BldaError::Contract("dump has no labeled records to audit".into()));
    }
    Ok(BiasReport {
        provenance: Provenance::new(cfg),
        num_classes: n,
        domains,
        bank: BankSummary::of(bank),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankFile {
    pub provenance: Provenance,
    pub bank: GmmBank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFile {
    pub provenance: Provenance,
    pub run: RunReport,
}

/// Summary tables of a toy run as TSV: one row per variant, then one row
/// per class and variant.
pub fn run_tsv(run: &RunReport) -> String {
    let mut out = String::from("variant\tmacc\tmiou\tstd_acc\tstd_iou\tmax_abs_bias\n");
    let variants = [&run.baseline, &run.blda];
    for v in variants {
        let s = &v.summary;
        out += &format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            v.variant.as_str(),
            s.macc,
            s.miou,
            s.std_acc,
            s.std_iou,
            v.max_abs_bias
        );
    }
    out += "\nclass\tvariant\tacc\tiou\tbias\tsign\n";
    let fmt = |x: Option<f64>| x.map_or("NA".to_string(), |x| format!("{x:.6}"));
    for c in 0..run.baseline.per_class.len() {
        for v in variants {
            let m = &v.per_class[c];
            let b = v.empirical_bias[c];
            let sign = serde_json::to_value(BiasSign::of(b)).expect("sign serializes");
            out += &format!(
                "{c}\t{}\t{}\t{}\t{b:.6}\t{}\n",
                v.variant.as_str(),
                fmt(m.acc),
                fmt(m.iou),
                sign.as_str().unwrap_or_default()
            );
        }
    }
    out
}
