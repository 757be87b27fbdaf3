use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{BldaError, Result};
use crate::gmm::EmConfig;
use crate::losses::LossConfig;
use crate::toyuda::DomainSpec;

/// Optimizer schedule and bookkeeping for the toy harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Linear learning-rate warm-up length; 0 disables it.
    pub warmup_iters: usize,
    pub sgd_momentum: f64,
    /// L2 penalty added to every parameter gradient.
    pub weight_decay: f64,
    /// Hidden width of the scorer; 0 means linear.
    pub hidden: usize,
    pub init_scale: f64,
    pub eval_every: usize,
    /// Parameter drift at which offline bank estimation stops.
    pub offline_tol: f64,
    pub offline_max_epochs: usize,
    /// Reservoir cap and epoch budget of the bank fitted on held-out logits
    /// for the run report.
    pub report_cell_cap: usize,
    pub report_epochs: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            iterations: 2000,
            batch_size: 256,
            lr: 0.05,
            warmup_iters: 0,
            sgd_momentum: 0.9,
            weight_decay: 1e-3,
            hidden: 0,
            init_scale: 0.01,
            eval_every: 100,
            offline_tol: 1e-4,
            offline_max_epochs: 200,
            report_cell_cap: 2000,
            report_epochs: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub em: EmConfig,
    pub loss: LossConfig,
    pub n_min: usize,
    /// Teacher EMA coefficient.
    pub ema: f64,
    pub cell_cap: usize,
    pub mc_samples: usize,
    pub seed: u64,
    pub domain: DomainSpec,
    pub train: TrainSchedule,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            em: EmConfig::default(),
            loss: LossConfig::default(),
            n_min: 100,
            ema: 0.999,
            cell_cap: 10_000,
            mc_samples: 20_000,
            seed: 0,
            domain: DomainSpec::default(),
            train: TrainSchedule::default(),
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.em.validate()?;
        self.loss.validate()?;
        self.domain.validate()?;
        if self.n_min == 0 || self.cell_cap == 0 || self.mc_samples == 0 {
            return Err(BldaError::Config("n_min, cell_cap and mc_samples must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema) {
            return Err(BldaError::Config("ema must lie in [0, 1)".into()));
        }
        let t = &self.train;
        if t.batch_size == 0
            || t.eval_every == 0
            || !(t.lr > 0.0)
            || !(0.0..1.0).contains(&t.sgd_momentum)
            || !(t.weight_decay >= 0.0)
        {
            return Err(BldaError::Config("invalid training schedule".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = Config::default();
        assert_eq!(c.em.k, 5);
        assert_eq!(c.em.em_loops, 3);
        assert_eq!(c.em.momentum, 0.99);
        assert_eq!(c.loss.tau, 0.1);
        assert_eq!(c.loss.lambda, 0.2);
        assert_eq!(c.ema, 0.999);
        assert_eq!(c.n_min, 100);
        assert_eq!(c.domain.num_classes, 5);
        assert_eq!(c.domain.dim, 5);
        c.validate().unwrap();
    }

    #[test]
    fn hash_tracks_content() {
        let a = Config::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.loss.tau = 0.5;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: Config = serde_json::from_str(r#"{"seed": 7, "loss": {"tau": 1.0}}"#).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.loss.tau, 1.0);
        assert_eq!(c.loss.lambda, 0.2);
    }
}
