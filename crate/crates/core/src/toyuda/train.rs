//! The online self-training loop, with and without balanced logit
//! adjustment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{build_offsets, OffsetEvaluator};
use crate::config::Config;
use crate::error::Result;
use crate::gmm::ks_distance;
use crate::logit_stats::{argmax, bias_from_predictions, sample_cells, Domain, GmmBank, LogitSetMatrix, SampleSize};
use crate::losses::{adjusted_ce_loss, cde_regression_loss, ce_loss, softmax, target_loss, CompensatedSum};
use crate::metrics::EvalTally;

use super::data::{LabeledSet, UnlabeledSet};
use super::model::{Layout, ToyModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Plain self-training; no bank is maintained.
    Baseline,
    Blda,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Blda => "blda",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub loss_source: f64,
    pub loss_target: f64,
    pub loss_reg_source: f64,
    pub loss_reg_target: f64,
    pub macc: f64,
    pub miou: f64,
    pub max_abs_bias: f64,
    /// Mean KS distance of the target diagonal cells to the positive anchor.
    pub ks_to_anchor: Option<f64>,
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub variant: Variant,
    pub iteration: usize,
    pub student: ToyModel,
    pub teacher: ToyModel,
    pub velocity: Vec<f64>,
    pub bank: GmmBank,
    pub source_cells: LogitSetMatrix,
    pub target_cells: LogitSetMatrix,
    pub source_offsets: OffsetEvaluator,
    pub target_offsets: OffsetEvaluator,
    pub batch_rng: ChaCha8Rng,
    pub bank_rng: ChaCha8Rng,
    pub history: Vec<HistoryRow>,
}

/// Per-step loss terms, each already averaged over its minibatch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepLosses {
    pub source: f64,
    pub target: f64,
    pub reg_source: f64,
    pub reg_target: f64,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl TrainState {
    pub fn new(variant: Variant, cfg: &Config, input_dim: usize) -> Self {
        let c = cfg.domain.num_classes;
        let layout = Layout {
            input_dim,
            hidden: cfg.train.hidden,
            num_classes: c,
        };
        let student = ToyModel::new(layout, cfg.train.init_scale, cfg.seed);
        TrainState {
            variant,
            iteration: 0,
            teacher: student.clone(),
            velocity: vec![0.0; layout.len()],
            student,
            bank: GmmBank::new(c, cfg.n_min),
            source_cells: LogitSetMatrix::new(c, cfg.cell_cap, cfg.seed.wrapping_add(11)),
            target_cells: LogitSetMatrix::new(c, cfg.cell_cap, cfg.seed.wrapping_add(12)),
            source_offsets: OffsetEvaluator::zero(c),
            target_offsets: OffsetEvaluator::zero(c),
            batch_rng: stream_rng(cfg.seed, 10),
            bank_rng: stream_rng(cfg.seed, 11),
            history: Vec::new(),
        }
    }

    /// Ingests the step's logits, refreshes both banks and the anchors, and
    /// rebuilds the offsets.
    fn refresh_bank(
        &mut self,
        source: &[(usize, Vec<f64>)],
        target: &[(usize, Vec<f64>)],
        cfg: &Config,
    ) -> Result<()> {
        for (y, z) in source {
            self.source_cells.push(*y, z)?;
        }
        for (y, z) in target {
            self.target_cells.push(*y, z)?;
        }
        let s = sample_cells(&self.source_cells, SampleSize::MinCell, cfg.n_min, &mut self.bank_rng);
        let t = sample_cells(&self.target_cells, SampleSize::MinCell, cfg.n_min, &mut self.bank_rng);
        self.bank.update(Domain::Source, &s, &cfg.em)?;
        self.bank.update(Domain::Target, &t, &cfg.em)?;
        self.source_cells.drain_sampled(&s);
        self.target_cells.drain_sampled(&t);
        if self.bank.anchor_pos().is_some() && self.bank.anchor_neg().is_some() {
            self.source_offsets = build_offsets(&self.bank, Domain::Source)?;
            self.target_offsets = build_offsets(&self.bank, Domain::Target)?;
        }
        Ok(())
    }

    /// Mean KS distance from the estimated target positive cells to the
    /// positive anchor.
    pub fn ks_to_anchor(&self) -> Option<f64> {
        let anchor = self.bank.anchor_pos()?;
        let n = self.bank.num_classes();
        let ks: Vec<f64> = (0..n)
            .filter_map(|c| self.bank.cell(Domain::Target, c, c))
            .map(|m| ks_distance(m, anchor))
            .collect();
        if ks.is_empty() {
            None
        } else {
            Some(ks.iter().sum::<f64>() / ks.len() as f64)
        }
    }
}

/// One iteration of the online loop on fresh minibatches.
pub fn train_step(
    state: &mut TrainState,
    source: &LabeledSet,
    target: &UnlabeledSet,
    cfg: &Config,
) -> Result<StepLosses> {
    let b = cfg.train.batch_size;
    let src_idx: Vec<usize> = (0..b).map(|_| state.batch_rng.random_range(0..source.len())).collect();
    let tgt_idx: Vec<usize> = (0..b).map(|_| state.batch_rng.random_range(0..target.len())).collect();

    let src_fwd: Vec<_> = src_idx.iter().map(|&i| state.student.forward(source.row(i))).collect();
    let tgt_fwd: Vec<_> = tgt_idx.iter().map(|&i| state.student.forward(target.row(i))).collect();
    let pseudo: Vec<(usize, f64)> = tgt_idx
        .iter()
        .map(|&i| {
            let p = softmax(&state.teacher.logits(target.row(i)));
            let y = argmax(&p);
            (y, p[y])
        })
        .collect();
    let quality: Vec<f64> = pseudo.iter().map(|&(_, p)| cfg.loss.quality.weight(p)).collect();

    let blda = state.variant == Variant::Blda;
    if blda {
        let s: Vec<_> = src_idx
            .iter()
            .zip(&src_fwd)
            .map(|(&i, f)| (source.labels[i], f.logits.clone()))
            .collect();
        let t: Vec<_> = pseudo
            .iter()
            .zip(&tgt_fwd)
            .zip(&quality)
            .filter(|(_, &q)| q > 0.0)
            .map(|((&(y, _), f), _)| (y, f.logits.clone()))
            .collect();
        state.refresh_bank(&s, &t, cfg)?;
    }

    let scale = 1.0 / b as f64;
    let lambda = if blda { cfg.loss.lambda } else { 0.0 };
    let mut grad = vec![0.0; state.student.params.len()];
    let mut sums = [CompensatedSum::default(); 4];

    for (&i, fwd) in src_idx.iter().zip(&src_fwd) {
        let y = source.labels[i];
        let (loss, mut g) = if blda {
            adjusted_ce_loss(&fwd.logits, y, &state.source_offsets, cfg.loss.tau)
        } else {
            ce_loss(&fwd.logits, y)
        };
        sums[0].add(loss * scale);
        g.iter_mut().for_each(|v| *v *= scale);
        let mut d_cde = 0.0;
        if lambda > 0.0 {
            if let Some(cell) = state.bank.cell(Domain::Source, y, y) {
                let (l, d) = cde_regression_loss(fwd.cde, cell.cdf(fwd.logits[y]), 1.0);
                sums[2].add(l * scale);
                d_cde = lambda * scale * d;
            }
        }
        state.student.backward(source.row(i), fwd, &g, d_cde, &mut grad);
    }

    for (((&i, fwd), &(y, p)), &q) in tgt_idx.iter().zip(&tgt_fwd).zip(&pseudo).zip(&quality) {
        if q == 0.0 {
            continue;
        }
        let (loss, mut g) = if blda {
            target_loss(&fwd.logits, y, p, &state.target_offsets, &cfg.loss)
        } else {
            let (l, mut g) = ce_loss(&fwd.logits, y);
            g.iter_mut().for_each(|v| *v *= q);
            (q * l, g)
        };
        sums[1].add(loss * scale);
        g.iter_mut().for_each(|v| *v *= scale);
        let mut d_cde = 0.0;
        if lambda > 0.0 {
            if let Some(cell) = state.bank.cell(Domain::Target, y, y) {
                let (l, d) = cde_regression_loss(fwd.cde, cell.cdf(fwd.logits[y]), q);
                sums[3].add(l * scale);
                d_cde = lambda * scale * d;
            }
        }
        state.student.backward(target.row(i), fwd, &g, d_cde, &mut grad);
    }

    let t = &cfg.train;
    let lr = if t.warmup_iters > 0 {
        t.lr * ((state.iteration + 1) as f64 / t.warmup_iters as f64).min(1.0)
    } else {
        t.lr
    };
    for ((p, v), g) in state.student.params.iter_mut().zip(&mut state.velocity).zip(&grad) {
        *v = t.sgd_momentum * *v + g + t.weight_decay * *p;
        *p -= lr * *v;
    }
    state.teacher.ema_from(&state.student, cfg.ema);
    state.iteration += 1;

    Ok(StepLosses {
        source: sums[0].value(),
        target: sums[1].value(),
        reg_source: sums[2].value(),
        reg_target: sums[3].value(),
    })
}

/// Student argmax predictions on `set`.
pub fn predict(model: &ToyModel, set: &LabeledSet) -> Vec<usize> {
    (0..set.len()).map(|i| argmax(&model.logits(set.row(i)))).collect()
}

/// Confusion tally and bias vector of the student on a labeled set.
pub fn evaluate(model: &ToyModel, set: &LabeledSet) -> Result<(EvalTally, Vec<f64>)> {
    let c = model.layout.num_classes;
    let preds = predict(model, set);
    let tally = EvalTally::from_predictions(&set.labels, &preds, c)?;
    let bias = bias_from_predictions(&set.labels, &preds, c)?;
    Ok((tally, bias))
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Trains until `state.iteration == until`, appending a history row every
/// `eval_every` iterations and at the scheduled final iteration.
pub fn train_until(
    state: &mut TrainState,
    source: &LabeledSet,
    target: &UnlabeledSet,
    eval: &LabeledSet,
    cfg: &Config,
    until: usize,
) -> Result<()> {
    while state.iteration < until {
        let losses = train_step(state, source, target, cfg)?;
        if state.iteration % cfg.train.eval_every == 0 || state.iteration == cfg.train.iterations {
            let (tally, bias) = evaluate(&state.student, eval)?;
            let s = tally.summary();
            state.history.push(HistoryRow {
                iteration: state.iteration,
                loss_source: losses.source,
                loss_target: losses.target,
                loss_reg_source: losses.reg_source,
                loss_reg_target: losses.reg_target,
                macc: s.macc,
                miou: s.miou,
                max_abs_bias: max_abs(&bias),
                ks_to_anchor: state.ks_to_anchor(),
            });
        }
    }
    Ok(())
}
