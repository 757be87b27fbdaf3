//! The `blda` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::align::{build_offsets, post_hoc_predict};
use crate::config::Config;
use crate::error::{BldaError, Result};
use crate::logit_stats::{argmax, estimate_offline, Domain, OfflineFit};
use crate::toyuda::{run_experiment, HistoryRow, RunOutcome, VariantReport};

use super::dump::read_logit_dump;
use super::files::{read_json, write_atomic, write_json};
use super::report::{audit, run_tsv, BankFile, Provenance, RunFile};
use super::settings::resolve_config;

#[derive(Debug, Parser)]
#[command(name = "blda", version, about = "Logit-distribution estimation, bias audits and balanced prediction")]
pub struct Cli {
    /// Overrides the config seed and the toy-domain seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Suppress progress messages on stderr.
    #[arg(long, global = true)]
    pub quiet: bool,
    /// Print errors as one-line JSON objects.
    #[arg(long, global = true)]
    pub json_errors: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a GMM bank offline from a logit dump.
    Estimate {
        #[arg(long)]
        logits: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a bias report for a logit dump and a bank.
    Audit {
        #[arg(long)]
        logits: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write plain and balanced predictions for every record.
    Adjust {
        #[arg(long)]
        logits: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        /// Defaults to the config's `loss.tau`.
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train baseline and balanced students on the synthetic task.
    TrainToy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the summary tables of a `train-toy` run as TSV.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

struct Ctx<'a, V> {
    seed: Option<u64>,
    quiet: bool,
    vars: &'a V,
}

impl<V> Ctx<'_, V>
where
    V: Clone + IntoIterator<Item = (String, String)>,
{
    fn config(&self, file: Option<&Path>) -> Result<Config> {
        let mut cfg = resolve_config(file, self.vars.clone())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.domain.seed = s;
        }
        Ok(cfg)
    }

    fn note(&self, msg: &str) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }
}

/// Parses `argv`, runs the command and returns the exit status. Errors go to
/// `err` as one line starting with `error[CODE]`.
pub fn dispatch<I, T, V>(argv: I, vars: V, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
    V: Clone + IntoIterator<Item = (String, String)>,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let json_errors = argv.iter().any(|a| a == "--json-errors");
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = write!(out, "{}", e.render());
            return 0;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("usage error");
            let msg = first.strip_prefix("error: ").unwrap_or(first);
            report_error(err, json_errors, "E_USAGE", msg);
            let usage: Vec<&str> = rendered.lines().skip(1).collect();
            let _ = writeln!(err, "{}", usage.join("\n").trim());
            return 2;
        }
    };
    let ctx = Ctx {
        seed: cli.seed,
        quiet: cli.quiet,
        vars: &vars,
    };
    match run(&cli.command, &ctx, out) {
        Ok(()) => 0,
        Err(e) => {
            report_error(err, cli.json_errors, e.code(), &e.to_string());
            1
        }
    }
}

fn report_error(err: &mut dyn Write, json: bool, code: &str, msg: &str) {
    let msg = msg.replace('\n', " ");
    let _ = if json {
        writeln!(err, "{}", serde_json::json!({ "error": { "code": code, "message": msg } }))
    } else {
        writeln!(err, "error[{code}]: {msg}")
    };
}

fn run<V>(cmd: &Command, ctx: &Ctx<'_, V>, out: &mut dyn Write) -> Result<()>
where
    V: Clone + IntoIterator<Item = (String, String)>,
{
    match cmd {
        Command::Estimate { logits, config, out: path } => {
            let cfg = ctx.config(config.as_deref())?;
            let batch = read_logit_dump(logits)?;
            let fit = OfflineFit {
                n_min: cfg.n_min,
                cell_cap: cfg.cell_cap,
                tol: cfg.train.offline_tol,
                max_epochs: cfg.train.offline_max_epochs,
                seed: cfg.seed,
            };
            let (bank, epochs) = estimate_offline(&batch, &cfg.em, &fit)?;
            let missing = bank.missing_cells(Domain::Source).len() + bank.missing_cells(Domain::Target).len();
            ctx.note(&format!("estimate: {epochs} epochs, {missing} unestimated cells"));
            write_json(
                path,
                &BankFile {
                    provenance: Provenance::new(&cfg),
                    bank,
                },
            )
        }
        Command::Audit {
            logits,
            bank,
            config,
            out: path,
        } => {
            let cfg = ctx.config(config.as_deref())?;
            let batch = read_logit_dump(logits)?;
            let bank: BankFile = read_json(bank)?;
            write_json(path, &audit(&batch, &bank.bank, &cfg)?)
        }
        Command::Adjust {
            logits,
            bank,
            tau,
            config,
            out: path,
        } => {
            let cfg = ctx.config(config.as_deref())?;
            let tau = tau.unwrap_or(cfg.loss.tau);
            if !(tau >= 0.0) {
                return Err(BldaError::Config(format!("tau must be non-negative, got {tau}")));
            }
            let batch = read_logit_dump(logits)?;
            let bank: BankFile = read_json(bank)?;
            if bank.bank.num_classes() != batch.num_classes() {
                return Err(BldaError::Contract(format!(
                    "dump has {} classes, bank has {}",
                    batch.num_classes(),
                    bank.bank.num_classes()
                )));
            }
            let source = build_offsets(&bank.bank, Domain::Source)?;
            let target = build_offsets(&bank.bank, Domain::Target)?;
            let mut csv = String::from("index,domain,label,argmax,adjusted\n");
            for (i, r) in batch.records().iter().enumerate() {
                let offsets = match r.domain {
                    Domain::Source => &source,
                    Domain::Target => &target,
                };
                let adjusted = post_hoc_predict(&r.logits, offsets, tau)?;
                let label = r.label.map_or(-1, |l| l as i64);
                csv += &format!("{i},{},{label},{},{adjusted}\n", r.domain.as_str(), argmax(&r.logits));
            }
            write_atomic(path, csv.as_bytes())
        }
        Command::TrainToy { config, out: dir } => {
            let cfg = ctx.config(config.as_deref())?;
            ctx.note(&format!("train-toy: {} iterations per variant", cfg.train.iterations));
            let outcome = run_experiment(&cfg)?;
            write_run(dir, &cfg, &outcome)?;
            let r = &outcome.report;
            ctx.note(&format!(
                "train-toy: mAcc baseline {:.4} blda {:.4}",
                r.baseline.summary.macc, r.blda.summary.macc
            ));
            Ok(())
        }
        Command::Report { run } => {
            let file: RunFile = read_json(run.join("report.json"))?;
            out.write_all(run_tsv(&file.run).as_bytes())
                .map_err(|e| BldaError::io("<stdout>", e))
        }
    }
}

/// Writes `config.json`, `history.tsv`, `bank_final.json`, `report.json`
/// and `preds_final.csv` into `dir`.
pub fn write_run(dir: &Path, cfg: &Config, outcome: &RunOutcome) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| BldaError::io(dir, e))?;
    let provenance = Provenance::new(cfg);

    let mut config = serde_json::to_value(cfg)?;
    config["provenance"] = serde_json::to_value(&provenance)?;
    write_json(dir.join("config.json"), &config)?;

    write_atomic(dir.join("history.tsv"), history_tsv(&[&outcome.report.baseline, &outcome.report.blda]).as_bytes())?;
    write_json(
        dir.join("bank_final.json"),
        &BankFile {
            provenance: provenance.clone(),
            bank: outcome.bank.clone(),
        },
    )?;
    write_json(
        dir.join("report.json"),
        &RunFile {
            provenance,
            run: outcome.report.clone(),
        },
    )?;
    let mut preds = String::from("index,label,baseline,blda\n");
    for p in &outcome.predictions {
        preds += &format!("{},{},{},{}\n", p.index, p.label, p.baseline, p.blda);
    }
    write_atomic(dir.join("preds_final.csv"), preds.as_bytes())
}

pub fn history_tsv(variants: &[&VariantReport]) -> String {
    let mut s = String::from(
        "variant\titeration\tloss_source\tloss_target\tloss_reg_source\tloss_reg_target\tmacc\tmiou\tmax_abs_bias\tks_to_anchor\n",
    );
    for v in variants {
        for HistoryRow {
            iteration,
            loss_source,
            loss_target,
            loss_reg_source,
            loss_reg_target,
            macc,
            miou,
            max_abs_bias,
            ks_to_anchor,
        } in &v.history
        {
            let ks = ks_to_anchor.map_or("NA".to_string(), |k| k.to_string());
            s += &format!(
                "{}\t{iteration}\t{loss_source}\t{loss_target}\t{loss_reg_source}\t{loss_reg_target}\t{macc}\t{miou}\t{max_abs_bias}\t{ks}\n",
                v.variant.as_str()
            );
        }
    }
    s
}
