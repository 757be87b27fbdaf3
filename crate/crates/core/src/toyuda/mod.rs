//! Desk-scale self-training harness on synthetic shifted domains.

mod data;
mod experiment;
mod model;
mod train;

pub use data::{generate_domains, source_holdout, DomainSpec, Domains, LabeledSet, UnlabeledSet};
pub use experiment::{
    finish_experiment, resume, run_experiment, train_variant, variant_report, PredictionRow, RunOutcome, RunReport,
    VariantReport,
};
pub use model::{Forward, Layout, ToyModel};
pub use train::{evaluate, max_abs, predict, train_step, train_until, HistoryRow, StepLosses, TrainState, Variant};
