//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use blda::align::LogitOffsets;
use blda::gmm::{Component, GaussianMixture, GridSpec};
use blda::logit_stats::{Domain, GmmBank, LogitBatch, LogitRecord};

/// Composite Simpson rule with `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

pub fn std_normal_pdf(t: f64) -> f64 {
    (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Φ(z) = 1/2 + ∫₀ᶻ φ, by quadrature.
pub fn normal_cdf_oracle(z: f64) -> f64 {
    let n = ((z.abs() * 400.0).ceil() as usize).max(2);
    0.5 + simpson(std_normal_pdf, 0.0, z, n)
}

pub fn mixture_cdf_oracle(components: &[Component], z: f64) -> f64 {
    components
        .iter()
        .map(|c| c.weight * normal_cdf_oracle((z - c.mean) / c.std))
        .sum()
}

/// Root of a non-decreasing `f` on `[lo, hi]`.
pub fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Central finite-difference gradient.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            xp[i] = x[i] + h;
            let up = f(&xp);
            xp[i] = x[i] - h;
            let down = f(&xp);
            xp[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞, floor)`.
pub fn rel_vec_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = a.iter().chain(b).fold(floor, |m, x| m.max(x.abs()));
    diff / scale
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Revised posterior under a uniform prior, evaluated literally: for each
/// candidate `c`, `p(c)·exp(z_c + τΔ_cc) / Σ_{c'} exp(z_{c'} + τΔ_{cc'})`.
/// Returns the per-candidate scores.
pub fn revised_posterior_scores<O: LogitOffsets>(logits: &[f64], offsets: &O, tau: f64) -> Vec<f64> {
    let n = logits.len();
    let prior = 1.0 / n as f64;
    (0..n)
        .map(|c| {
            let num = (logits[c] + tau * offsets.delta(c, c, logits[c])).exp();
            let den: f64 = (0..n)
                .map(|c2| (logits[c2] + tau * offsets.delta(c, c2, logits[c2])).exp())
                .sum();
            prior * num / den
        })
        .collect()
}

/// Index of the best score and its relative lead over the runner-up.
pub fn best_with_margin(scores: &[f64]) -> (usize, f64) {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let lead = if scores.len() > 1 {
        rel_err(scores[idx[0]], scores[idx[1]])
    } else {
        f64::INFINITY
    };
    (idx[0], lead)
}

pub fn random_mixture(rng: &mut ChaCha8Rng, k: usize, center: f64) -> GaussianMixture {
    let mut comps: Vec<Component> = (0..k)
        .map(|_| Component {
            weight: rng.random_range(0.2..1.0),
            mean: center + rng.random_range(-2.0..2.0),
            std: rng.random_range(0.3..1.5),
        })
        .collect();
    let total: f64 = comps.iter().map(|c| c.weight).sum();
    comps.iter_mut().for_each(|c| c.weight /= total);
    GaussianMixture::new(comps, GridSpec::default()).unwrap()
}

/// Bank with every cell of both domains and both anchors filled with
/// random mixtures; positives centered higher than negatives.
pub fn random_full_bank(rng: &mut ChaCha8Rng, c: usize) -> GmmBank {
    let mut bank = GmmBank::new(c, 10);
    for d in [Domain::Source, Domain::Target] {
        for row in 0..c {
            for col in 0..c {
                let center = if row == col { 3.0 } else { -1.0 } + rng.random_range(-1.5..1.5);
                let k = rng.random_range(1..=3);
                let m = random_mixture(rng, k, center);
                bank.set_cell(d, row, col, m);
            }
        }
    }
    let pos = random_mixture(rng, 2, 3.0);
    let neg = random_mixture(rng, 2, -1.0);
    bank.set_anchors(pos, neg);
    bank
}

/// Records whose class-conditional logits are drawn independently from the
/// bank's own cells, so the independence assumption holds exactly.
pub fn independent_logits(bank: &GmmBank, domain: Domain, per_class: usize, rng: &mut ChaCha8Rng) -> LogitBatch {
    let n = bank.num_classes();
    let mut records = Vec::with_capacity(n * per_class);
    for c in 0..n {
        for _ in 0..per_class {
            let logits = (0..n).map(|l| bank.cell(domain, c, l).unwrap().sample(rng)).collect();
            records.push(LogitRecord {
                logits,
                label: Some(c),
                domain,
                quality: 1.0,
            });
        }
    }
    LogitBatch::new(n, records).unwrap()
}

/// Logits drawn from per-cell normals `N(means[c][l], stds[c][l])` for both
/// domains; target rows carry their labels.
pub fn normal_cell_dump(means: &[Vec<f64>], std: f64, per_class: usize, rng: &mut ChaCha8Rng) -> LogitBatch {
    use rand_distr::{Distribution, Normal};
    let n = means.len();
    let mut records = Vec::new();
    for domain in [Domain::Source, Domain::Target] {
        for (c, row) in means.iter().enumerate() {
            for _ in 0..per_class {
                let logits = row.iter().map(|&m| Normal::new(m, std).unwrap().sample(rng)).collect();
                records.push(LogitRecord {
                    logits,
                    label: Some(c),
                    domain,
                    quality: 1.0,
                });
            }
        }
    }
    LogitBatch::new(n, records).unwrap()
}

/// Population KS distance between samples and a CDF.
pub fn ks_to_cdf(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples.iter().enumerate().fold(0.0, |m, (i, &z)| {
        let f = cdf(z);
        m.max((f - i as f64 / n).abs()).max(((i + 1) as f64 / n - f).abs())
    })
}
