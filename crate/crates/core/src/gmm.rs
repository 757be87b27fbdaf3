//! One-dimensional Gaussian mixtures.
//!
//! A [`GaussianMixture`] caches a monotone `(z, F(z))` table on a uniform grid
//! so that inverse-CDF queries reduce to a binary search plus one linear
//! interpolation. The forward CDF uses the Abramowitz-Stegun 26.2.17
//! polynomial for the standard normal, so no `erf` is required.
//!
//! Fitting is warm-started EM ([`em_fit`]) followed by a convex merge with the
//! previous parameters ([`momentum_merge`]), which is how the per-cell banks
//! track a slowly drifting scorer.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{BldaError, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

// Abramowitz & Stegun 26.2.17, |error| < 7.5e-8.
const AS_P: f64 = 0.231_641_9;
const AS_B: [f64; 5] = [
    0.319_381_530,
    -0.356_563_782,
    1.781_477_937,
    -1.821_255_978,
    1.330_274_429,
];

/// Upper tail `1 - Φ(x)` for `x >= 0`.
#[inline]
fn upper_tail(x: f64) -> f64 {
    // exp(-x²/2) is below 1e-300 here; skip the subnormal slow path.
    if x > 37.0 {
        return 0.0;
    }
    let t = 1.0 / (1.0 + AS_P * x);
    let poly = t * (AS_B[0] + t * (AS_B[1] + t * (AS_B[2] + t * (AS_B[3] + t * AS_B[4]))));
    INV_SQRT_2PI * (-0.5 * x * x).exp() * poly
}

/// Unchecked standard normal CDF used on hot paths.
///
/// Symmetric by construction: `Φ(-z) + Φ(z) == 1` up to one rounding.
#[inline]
pub(crate) fn phi(z: f64) -> f64 {
    if z == 0.0 {
        0.5
    } else if z < 0.0 {
        upper_tail(-z)
    } else {
        1.0 - upper_tail(z)
    }
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> Result<f64> {
    if !z.is_finite() {
        return Err(BldaError::Domain(format!("normal_cdf of non-finite value {z}")));
    }
    Ok(phi(z))
}

#[inline]
pub fn normal_pdf(z: f64, mean: f64, std: f64) -> f64 {
    let u = (z - mean) / std;
    INV_SQRT_2PI / std * (-0.5 * u * u).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: f64,
    pub std: f64,
}

/// Resolution of the cached CDF table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub points: usize,
    /// Multiples of σ beyond the extreme component means.
    pub span: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            points: 1024,
            span: 6.0,
        }
    }
}

/// EM and grid settings shared by every mixture in a bank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub k: usize,
    pub em_loops: usize,
    pub momentum: f64,
    pub sigma_floor: f64,
    pub grid_points: usize,
    pub grid_span: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            k: 5,
            em_loops: 3,
            momentum: 0.99,
            sigma_floor: 1e-3,
            grid_points: 1024,
            grid_span: 6.0,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(BldaError::Config("k must be >= 1".into()));
        }
        if self.em_loops < 1 {
            return Err(BldaError::Config("em_loops must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(BldaError::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(BldaError::Config("sigma_floor must be positive".into()));
        }
        if self.grid_points < 16 {
            return Err(BldaError::Config("grid_points must be >= 16".into()));
        }
        if !(self.grid_span > 0.0) {
            return Err(BldaError::Config("grid_span must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec {
            points: self.grid_points,
            span: self.grid_span,
        }
    }
}

/// K-component 1-D normal mixture with a cached CDF grid.
///
/// Immutable once built; every parameter change goes through a constructor
/// that rebuilds the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureRepr", into = "MixtureRepr")]
pub struct GaussianMixture {
    components: Vec<Component>,
    grid: GridSpec,
    grid_lo: f64,
    grid_step: f64,
    grid_cdf: Vec<f64>,
}

/// On-disk form: parameters only, the grid is rebuilt on load.
#[derive(Serialize, Deserialize)]
struct MixtureRepr {
    weights: Vec<f64>,
    means: Vec<f64>,
    stds: Vec<f64>,
    #[serde(default = "default_points")]
    grid_points: usize,
    #[serde(default = "default_span")]
    grid_span: f64,
}

fn default_points() -> usize {
    GridSpec::default().points
}

fn default_span() -> f64 {
    GridSpec::default().span
}

impl From<GaussianMixture> for MixtureRepr {
    fn from(m: GaussianMixture) -> Self {
        MixtureRepr {
            weights: m.components.iter().map(|c| c.weight).collect(),
            means: m.components.iter().map(|c| c.mean).collect(),
            stds: m.components.iter().map(|c| c.std).collect(),
            grid_points: m.grid.points,
            grid_span: m.grid.span,
        }
    }
}

impl TryFrom<MixtureRepr> for GaussianMixture {
    type Error = BldaError;

    fn try_from(r: MixtureRepr) -> Result<Self> {
        if r.weights.len() != r.means.len() || r.means.len() != r.stds.len() {
            return Err(BldaError::Contract(
                "mixture weights/means/stds have different lengths".into(),
            ));
        }
        let components = r
            .weights
            .iter()
            .zip(&r.means)
            .zip(&r.stds)
            .map(|((&weight, &mean), &std)| Component { weight, mean, std })
            .collect();
        GaussianMixture::new(
            components,
            GridSpec {
                points: r.grid_points,
                span: r.grid_span,
            },
        )
    }
}

impl GaussianMixture {
    /// Validates the components and builds the CDF grid.
    pub fn new(components: Vec<Component>, grid: GridSpec) -> Result<Self> {
        if components.is_empty() {
            return Err(BldaError::Contract("mixture needs at least one component".into()));
        }
        if grid.points < 16 || !(grid.span > 0.0) {
            return Err(BldaError::Contract(format!("invalid grid spec {grid:?}")));
        }
        let mut total = 0.0;
        for c in &components {
            if !(c.weight >= 0.0) || !c.mean.is_finite() || !(c.std > 0.0) || !c.std.is_finite() {
                return Err(BldaError::Contract(format!("invalid component {c:?}")));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(BldaError::Contract(format!("mixture weights sum to {total}")));
        }
        Ok(Self::build(components, grid))
    }

    /// Like [`GaussianMixture::new`] but renormalizes the weights and applies
    /// the σ floor first.
    pub fn normalized(mut components: Vec<Component>, grid: GridSpec, sigma_floor: f64) -> Result<Self> {
        normalize_components(&mut components, sigma_floor)?;
        Self::new(components, grid)
    }

    pub fn single(mean: f64, std: f64) -> Result<Self> {
        Self::new(vec![Component { weight: 1.0, mean, std }], GridSpec::default())
    }

    fn build(components: Vec<Component>, grid: GridSpec) -> Self {
        let lo = components
            .iter()
            .map(|c| c.mean - grid.span * c.std)
            .fold(f64::INFINITY, f64::min);
        let hi = components
            .iter()
            .map(|c| c.mean + grid.span * c.std)
            .fold(f64::NEG_INFINITY, f64::max);
        let step = (hi - lo) / (grid.points - 1) as f64;
        let mut m = GaussianMixture {
            components,
            grid,
            grid_lo: lo,
            grid_step: step,
            grid_cdf: Vec::with_capacity(grid.points),
        };
        let mut running = 0.0_f64;
        for i in 0..grid.points {
            running = running.max(m.cdf(lo + i as f64 * step));
            m.grid_cdf.push(running);
        }
        m
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn grid_spec(&self) -> GridSpec {
        self.grid
    }

    /// `(lo, hi)` of the cached grid.
    pub fn grid_range(&self) -> (f64, f64) {
        (self.grid_lo, self.grid_z(self.grid.points - 1))
    }

    #[inline]
    pub fn grid_z(&self, i: usize) -> f64 {
        self.grid_lo + i as f64 * self.grid_step
    }

    pub fn grid_step(&self) -> f64 {
        self.grid_step
    }

    /// Cached CDF values at [`GaussianMixture::grid_z`].
    pub fn grid_cdf(&self) -> &[f64] {
        &self.grid_cdf
    }

    pub fn pdf(&self, z: f64) -> f64 {
        self.components
            .iter()
            .map(|c| c.weight * normal_pdf(z, c.mean, c.std))
            .sum()
    }

    pub fn cdf(&self, z: f64) -> f64 {
        let f: f64 = self
            .components
            .iter()
            .map(|c| c.weight * phi((z - c.mean) / c.std))
            .sum();
        // Weights sum to 1 only up to rounding.
        f.clamp(0.0, 1.0)
    }

    /// Quantile: the grid brackets the root, linear interpolation gives the
    /// first guess and bisection on the exact CDF refines it when a component
    /// is too narrow for the grid. `p` outside the tabulated range clamps to
    /// the grid endpoints.
    pub fn inverse_cdf(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(BldaError::Domain(format!("inverse_cdf needs p in (0,1), got {p}")));
        }
        let i = self.grid_cdf.partition_point(|&f| f < p);
        let z = self.interpolate_at(i, p);
        if i == 0 || i >= self.grid_cdf.len() || (self.cdf(z) - p).abs() <= 1e-9 {
            return Ok(z);
        }
        let (mut lo, mut hi) = (self.grid_z(i - 1), self.grid_z(i));
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    #[cfg(test)]
    fn quantile_clamped(&self, p: f64) -> f64 {
        let i = self.grid_cdf.partition_point(|&f| f < p);
        self.interpolate_at(i, p)
    }

    #[inline]
    fn interpolate_at(&self, i: usize, p: f64) -> f64 {
        let n = self.grid_cdf.len();
        if i == 0 {
            return self.grid_lo;
        }
        if i >= n {
            return self.grid_z(n - 1);
        }
        let (f0, f1) = (self.grid_cdf[i - 1], self.grid_cdf[i]);
        if f1 <= f0 {
            return self.grid_z(i);
        }
        self.grid_z(i - 1) + (p - f0) / (f1 - f0) * self.grid_step
    }

    /// Quantiles for an ascending sequence of probabilities in one sweep.
    pub(crate) fn quantiles_sorted(&self, ps: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let mut i = 0;
        let n = self.grid_cdf.len();
        for &p in ps {
            while i < n && self.grid_cdf[i] < p {
                i += 1;
            }
            out.push(self.interpolate_at(i, p));
        }
    }

    pub fn mean(&self) -> f64 {
        self.components.iter().map(|c| c.weight * c.mean).sum()
    }

    pub fn std(&self) -> f64 {
        let mean = self.mean();
        let second: f64 = self
            .components
            .iter()
            .map(|c| c.weight * (c.std * c.std + c.mean * c.mean))
            .sum();
        (second - mean * mean).max(0.0).sqrt()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = self.components.len() - 1;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                chosen = i;
                break;
            }
        }
        let c = &self.components[chosen];
        let n: f64 = rng.sample(StandardNormal);
        c.mean + c.std * n
    }

    /// Total log-likelihood of `samples`.
    pub fn log_likelihood(&self, samples: &[f64]) -> f64 {
        let mut log_w = Vec::with_capacity(self.k());
        let mut buf = vec![0.0; self.k()];
        for c in &self.components {
            log_w.push(c.weight.ln() - c.std.ln() - HALF_LN_2PI);
        }
        samples
            .iter()
            .map(|&x| log_sum_component_terms(&self.components, &log_w, x, &mut buf))
            .sum()
    }

    /// Largest absolute parameter difference against a mixture of equal k.
    pub fn max_param_diff(&self, other: &GaussianMixture) -> f64 {
        if self.k() != other.k() {
            return f64::INFINITY;
        }
        self.components
            .iter()
            .zip(&other.components)
            .map(|(a, b)| {
                (a.weight - b.weight)
                    .abs()
                    .max((a.mean - b.mean).abs())
                    .max((a.std - b.std).abs())
            })
            .fold(0.0, f64::max)
    }
}

/// Fills `buf[k]` with `log π_k + log N(x; μ_k, σ_k)` and returns their log-sum-exp.
#[inline]
fn log_sum_component_terms(components: &[Component], log_w: &[f64], x: f64, buf: &mut [f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for (k, c) in components.iter().enumerate() {
        let u = (x - c.mean) / c.std;
        let v = log_w[k] - 0.5 * u * u;
        buf[k] = v;
        if v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return max;
    }
    let s: f64 = buf.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

fn moments(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// The single-Gaussian moment fit replicated across `k` equal components,
/// so the result still lines up index-wise with k-component mixtures.
fn moment_fit(samples: &[f64], cfg: &EmConfig) -> Result<GaussianMixture> {
    let (mean, std) = moments(samples);
    let w = 1.0 / cfg.k as f64;
    let comps = vec![
        Component {
            weight: w,
            mean,
            std: std.max(cfg.sigma_floor),
        };
        cfg.k
    ];
    GaussianMixture::normalized(comps, cfg.grid(), cfg.sigma_floor)
}

/// Cold-start initialization: sorts the samples and fits one component per
/// equal-count quantile slice.
pub fn init_from_samples(samples: &[f64], cfg: &EmConfig) -> Result<GaussianMixture> {
    if samples.is_empty() {
        return Err(BldaError::Contract("cannot initialize a mixture from no samples".into()));
    }
    if samples.len() < cfg.k {
        return moment_fit(samples, cfg);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let (_, global_std) = moments(&sorted);
    let comps = (0..cfg.k)
        .map(|k| {
            let slice = &sorted[k * n / cfg.k..(k + 1) * n / cfg.k];
            let (mean, std) = moments(slice);
            Component {
                weight: slice.len() as f64 / n as f64,
                mean,
                std: std.max(global_std / cfg.k as f64).max(cfg.sigma_floor),
            }
        })
        .collect();
    GaussianMixture::normalized(comps, cfg.grid(), cfg.sigma_floor)
}

/// Runs exactly `cfg.em_loops` EM passes starting from `init`.
///
/// With fewer samples than components the result is a moment fit; with no
/// samples `init` is returned unchanged.
pub fn em_fit(init: &GaussianMixture, samples: &[f64], cfg: &EmConfig) -> Result<GaussianMixture> {
    match em_components(init, samples, cfg)? {
        Some(comps) => GaussianMixture::normalized(comps, cfg.grid(), cfg.sigma_floor),
        None => Ok(init.clone()),
    }
}

/// EM on raw components; `None` for an empty sample.
fn em_components(init: &GaussianMixture, samples: &[f64], cfg: &EmConfig) -> Result<Option<Vec<Component>>> {
    if samples.is_empty() {
        return Ok(None);
    }
    if samples.len() < cfg.k {
        return Ok(Some(moment_fit(samples, cfg)?.components));
    }
    check_k(init, cfg)?;
    let mut comps = init.components.clone();
    em_passes(&mut comps, samples, cfg, None);
    normalize_components(&mut comps, cfg.sigma_floor)?;
    Ok(Some(comps))
}

fn check_k(init: &GaussianMixture, cfg: &EmConfig) -> Result<()> {
    if init.k() != cfg.k {
        return Err(BldaError::Contract(format!(
            "em_fit init has {} components, config expects {}",
            init.k(),
            cfg.k
        )));
    }
    Ok(())
}

/// [`em_fit`] followed by [`momentum_merge`] against `old`, building the
/// CDF grid only once.
pub fn em_merge(old: &GaussianMixture, samples: &[f64], cfg: &EmConfig, staleness: u32) -> Result<GaussianMixture> {
    let Some(fitted) = em_components(old, samples, cfg)? else {
        return merge_components(&old.components, &old.components, old.grid, cfg.momentum, staleness);
    };
    if fitted.len() != old.k() {
        return Err(BldaError::Contract(format!(
            "momentum_merge of mixtures with k={} and k={}",
            old.k(),
            fitted.len()
        )));
    }
    merge_components(&old.components, &fitted, cfg.grid(), cfg.momentum, staleness)
}

fn em_passes(comps: &mut [Component], samples: &[f64], cfg: &EmConfig, mut trace: Option<&mut Vec<f64>>) {
    let k = cfg.k;
    let n = samples.len();
    let mut resp = vec![0.0; n * k];
    let mut log_w = vec![0.0; k];

    for _ in 0..cfg.em_loops {
        // E-step
        for (j, c) in comps.iter().enumerate() {
            log_w[j] = c.weight.ln() - c.std.ln() - HALF_LN_2PI;
        }
        let mut ll = 0.0;
        for (i, &x) in samples.iter().enumerate() {
            let row = &mut resp[i * k..(i + 1) * k];
            let mut max = f64::NEG_INFINITY;
            for ((r, c), &lw) in row.iter_mut().zip(comps.iter()).zip(&log_w) {
                let u = (x - c.mean) / c.std;
                *r = lw - 0.5 * u * u;
                max = max.max(*r);
            }
            if max == f64::NEG_INFINITY {
                row.fill(1.0 / k as f64);
                ll += max;
                continue;
            }
            let mut s = 0.0;
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                s += *r;
            }
            ll += max + s.ln();
            for r in row.iter_mut() {
                *r /= s;
            }
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(ll);
        }

        // M-step
        for (j, c) in comps.iter_mut().enumerate() {
            let mut nk = 0.0;
            let mut sx = 0.0;
            for (i, &x) in samples.iter().enumerate() {
                let r = resp[i * k + j];
                nk += r;
                sx += r * x;
            }
            if nk <= 1e-12 * n as f64 {
                c.weight = 0.0;
                continue;
            }
            let mean = sx / nk;
            let mut sxx = 0.0;
            for (i, &x) in samples.iter().enumerate() {
                let d = x - mean;
                sxx += resp[i * k + j] * d * d;
            }
            c.weight = nk / n as f64;
            c.mean = mean;
            c.std = (sxx / nk).sqrt().max(cfg.sigma_floor);
        }
    }
}

fn normalize_components(components: &mut [Component], sigma_floor: f64) -> Result<()> {
    let total: f64 = components.iter().map(|c| c.weight.max(0.0)).sum();
    if !(total > 0.0) {
        return Err(BldaError::Contract("mixture weights sum to zero".into()));
    }
    for c in components {
        c.weight = c.weight.max(0.0) / total;
        c.std = c.std.max(sigma_floor);
    }
    Ok(())
}

/// [`em_fit`] that also returns the batch log-likelihood before the first
/// pass and after each pass (`em_loops + 1` values).
pub fn em_fit_traced(
    init: &GaussianMixture,
    samples: &[f64],
    cfg: &EmConfig,
) -> Result<(GaussianMixture, Vec<f64>)> {
    if samples.is_empty() {
        return Ok((init.clone(), Vec::new()));
    }
    if samples.len() < cfg.k {
        let m = moment_fit(samples, cfg)?;
        let ll = m.log_likelihood(samples);
        return Ok((m, vec![ll]));
    }
    check_k(init, cfg)?;
    let mut comps = init.components.clone();
    let mut trace = Vec::with_capacity(cfg.em_loops + 1);
    em_passes(&mut comps, samples, cfg, Some(&mut trace));
    let fitted = GaussianMixture::normalized(comps, cfg.grid(), cfg.sigma_floor)?;
    trace.push(fitted.log_likelihood(samples));
    Ok((fitted, trace))
}

/// Convex merge `(1 - m^n)·fitted + m^n·old`, applied per component to each
/// of weight, mean and σ; weights are renormalized afterwards.
pub fn momentum_merge(
    old: &GaussianMixture,
    fitted: &GaussianMixture,
    momentum: f64,
    staleness: u32,
) -> Result<GaussianMixture> {
    if old.k() != fitted.k() {
        return Err(BldaError::Contract(format!(
            "momentum_merge of mixtures with k={} and k={}",
            old.k(),
            fitted.k()
        )));
    }
    merge_components(&old.components, &fitted.components, fitted.grid, momentum, staleness)
}

fn merge_components(
    old: &[Component],
    fitted: &[Component],
    grid: GridSpec,
    momentum: f64,
    staleness: u32,
) -> Result<GaussianMixture> {
    let keep = momentum.powi(staleness as i32);
    let take = 1.0 - keep;
    let comps = old
        .iter()
        .zip(fitted)
        .map(|(o, f)| Component {
            weight: take * f.weight + keep * o.weight,
            mean: take * f.mean + keep * o.mean,
            std: take * f.std + keep * o.std,
        })
        .collect();
    let floor = old.iter().chain(fitted).map(|c| c.std).fold(f64::INFINITY, f64::min);
    GaussianMixture::normalized(comps, grid, floor)
}

/// Kolmogorov-Smirnov distance between two mixtures, evaluated on a dense
/// grid covering both supports.
pub fn ks_distance(a: &GaussianMixture, b: &GaussianMixture) -> f64 {
    const POINTS: usize = 4096;
    let (alo, ahi) = a.grid_range();
    let (blo, bhi) = b.grid_range();
    let lo = alo.min(blo);
    let hi = ahi.max(bhi);
    let step = (hi - lo) / (POINTS - 1) as f64;
    (0..POINTS)
        .map(|i| {
            let z = lo + i as f64 * step;
            (a.cdf(z) - b.cdf(z)).abs()
        })
        .fold(0.0, f64::max)
}
