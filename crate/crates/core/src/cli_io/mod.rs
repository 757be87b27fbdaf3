//! File formats, configuration loading, reports and the command line.

mod cli;
mod dump;
mod files;
mod report;
mod settings;

pub use cli::{dispatch, history_tsv, write_run, Cli, Command};
pub use dump::{format_float, parse_logit_dump, read_logit_dump, render_logit_dump, write_logit_dump};
pub use files::{read_json, write_atomic, write_json};
pub use report::{
    audit, run_tsv, BankFile, BankSummary, BiasReport, BiasSign, CellSummary, DomainAudit, MomentSummary, Provenance,
    RunFile,
};
pub use settings::{load_config, resolve_config, ENV_PREFIX};
