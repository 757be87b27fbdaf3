//! Synthetic labeled source / unlabeled target domains.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{BldaError, Result};

/// Isotropic class-conditional Gaussians with per-domain priors. The target
/// domain translates every class mean and scales every std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub source_priors: Vec<f64>,
    pub target_priors: Vec<f64>,
    pub class_means: Vec<Vec<f64>>,
    pub class_stds: Vec<f64>,
    pub target_shift: Vec<Vec<f64>>,
    pub target_std_scale: f64,
    pub n_source: usize,
    pub n_target: usize,
    /// Size of the labeled held-out target split used only for evaluation.
    pub n_eval: usize,
    pub seed: u64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        DomainSpec::simplex(5, 0)
    }
}

/// Long-tailed source prior `∝ 0.35^c` and a flatter target prior `∝ 0.7^c`.
fn skewed_priors(num_classes: usize) -> (Vec<f64>, Vec<f64>) {
    let geometric = |r: f64| normalize((0..num_classes).map(|c| r.powi(c as i32)).collect());
    (geometric(0.35), geometric(0.7))
}

impl DomainSpec {
    /// Equidistant classes at `2·e_c` in `d = C`, with skewed priors. The
    /// target moves each class a fifth of the way toward its cyclic successor
    /// and widens it by 1.2.
    pub fn simplex(num_classes: usize, seed: u64) -> Self {
        assert!(num_classes >= 2);
        let radius = 2.0;
        let shift = 0.2;
        let unit = |c: usize| {
            let mut v = vec![0.0; num_classes];
            v[c] = radius;
            v
        };
        let class_means: Vec<Vec<f64>> = (0..num_classes).map(unit).collect();
        let target_shift = (0..num_classes)
            .map(|c| {
                let next = unit((c + 1) % num_classes);
                next.iter().zip(&class_means[c]).map(|(a, b)| shift * (a - b)).collect()
            })
            .collect();
        let (source_priors, target_priors) = skewed_priors(num_classes);
        DomainSpec {
            num_classes,
            dim: num_classes,
            source_priors,
            target_priors,
            class_means,
            class_stds: vec![0.9; num_classes],
            target_shift,
            target_std_scale: 1.2,
            n_source: 20_000,
            n_target: 20_000,
            n_eval: 20_000,
            seed,
        }
    }

    /// Classes on a radius-2 circle in `d = 2` with the same priors; the
    /// target is rotated by 0.35 rad and widened by 1.2. Neighbouring classes
    /// overlap far more than distant ones.
    pub fn circle(num_classes: usize, seed: u64) -> Self {
        assert!(num_classes >= 2);
        let radius = 2.0;
        let rotation = 0.35;
        let angle = |c: usize| 2.0 * std::f64::consts::PI * c as f64 / num_classes as f64;
        let class_means: Vec<Vec<f64>> = (0..num_classes)
            .map(|c| vec![radius * angle(c).cos(), radius * angle(c).sin()])
            .collect();
        let target_shift = (0..num_classes)
            .map(|c| {
                let a = angle(c) + rotation;
                vec![
                    radius * a.cos() - class_means[c][0],
                    radius * a.sin() - class_means[c][1],
                ]
            })
            .collect();
        DomainSpec {
            dim: 2,
            class_means,
            target_shift,
            ..DomainSpec::simplex(num_classes, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes;
        let bad = |m: &str| Err(BldaError::Config(format!("domain spec: {m}")));
        if c < 2 || self.dim < 1 {
            return bad("need at least 2 classes and 1 dimension");
        }
        for (name, p) in [("source_priors", &self.source_priors), ("target_priors", &self.target_priors)] {
            if p.len() != c || p.iter().any(|x| !(*x >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad(&format!("{name} must be {c} non-negative values summing to 1"));
            }
        }
        if self.class_means.len() != c || self.target_shift.len() != c || self.class_stds.len() != c {
            return bad("per-class tables must have one row per class");
        }
        let rows = self.class_means.iter().chain(&self.target_shift);
        if rows.clone().any(|r| r.len() != self.dim || r.iter().any(|v| !v.is_finite())) {
            return bad("means and shifts must be finite vectors of length dim");
        }
        if self.class_stds.iter().any(|s| !(*s >= 0.0)) || !(self.target_std_scale >= 0.0) {
            return bad("stds must be non-negative");
        }
        if self.n_source == 0 || self.n_target == 0 || self.n_eval == 0 {
            return bad("sample counts must be positive");
        }
        Ok(())
    }
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// Row-major features with labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSet {
    pub dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// Training view of the target domain: features only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlabeledSet {
    pub dim: usize,
    pub features: Vec<f64>,
}

impl UnlabeledSet {
    pub fn len(&self) -> usize {
        self.features.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Domains {
    pub source: LabeledSet,
    pub target: UnlabeledSet,
    /// Labels of `target`, kept for diagnostics only.
    pub target_hidden_labels: Vec<usize>,
    /// Independent labeled draws from the target distribution.
    pub target_eval: LabeledSet,
}

fn draw_class<R: Rng>(rng: &mut R, priors: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, &p) in priors.iter().enumerate() {
        acc += p;
        if u < acc {
            return c;
        }
    }
    priors.len() - 1
}

fn draw_set(spec: &DomainSpec, n: usize, target: bool, stream: u64) -> LabeledSet {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let priors = if target { &spec.target_priors } else { &spec.source_priors };
    let mut features = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = draw_class(&mut rng, priors);
        let std = spec.class_stds[c] * if target { spec.target_std_scale } else { 1.0 };
        for j in 0..spec.dim {
            let shift = if target { spec.target_shift[c][j] } else { 0.0 };
            let noise: f64 = rng.sample(StandardNormal);
            features.push(spec.class_means[c][j] + shift + std * noise);
        }
        labels.push(c);
    }
    LabeledSet {
        dim: spec.dim,
        features,
        labels,
    }
}

pub fn generate_domains(spec: &DomainSpec) -> Result<Domains> {
    spec.validate()?;
    let source = draw_set(spec, spec.n_source, false, 0);
    let target = draw_set(spec, spec.n_target, true, 1);
    let target_eval = draw_set(spec, spec.n_eval, true, 2);
    Ok(Domains {
        source,
        target: UnlabeledSet {
            dim: target.dim,
            features: target.features,
        },
        target_hidden_labels: target.labels,
        target_eval,
    })
}

/// Labeled draws from the source distribution on a separate stream, for
/// held-out source evaluation.
pub fn source_holdout(spec: &DomainSpec, n: usize) -> LabeledSet {
    draw_set(spec, n, false, 3)
}
