mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use blda::gmm::{EmConfig, GaussianMixture};
use blda::logit_stats::{distributional_bias, estimate_offline, sample_cells, Domain, LogitSetMatrix, OfflineFit, SampleSize};

use common::*;

#[test]
fn standard_normal_quantile_matches_bisection_on_quadrature() {
    let m = GaussianMixture::single(0.0, 1.0).unwrap();
    let oracle = bisect(|z| normal_cdf_oracle(z) - 0.975, -10.0, 10.0);
    assert!((oracle - 1.959964).abs() < 1e-5);
    let got = m.inverse_cdf(0.975).unwrap();
    assert!((got - oracle).abs() <= 5e-3, "{got} vs {oracle}");
}

#[test]
fn mixture_cdf_matches_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let m = random_mixture(&mut rng, 3, 0.0);
        for i in 0..41 {
            let z = -8.0 + 0.4 * i as f64;
            assert!((m.cdf(z) - mixture_cdf_oracle(m.components(), z)).abs() < 1e-6);
        }
    }
}

#[test]
fn distributional_bias_settles_with_more_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let bank = random_full_bank(&mut rng, 3);
    let a = distributional_bias(&bank, Domain::Source, 50_000, 1).unwrap();
    let b = distributional_bias(&bank, Domain::Source, 100_000, 2).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 0.01, "{a:?} vs {b:?}");
    }
    assert!(a.iter().sum::<f64>().abs() < 1e-9);
}

#[test]
fn bank_update_touches_only_sampled_cells() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut bank = random_full_bank(&mut rng, 3);
    bank.set_cell(Domain::Target, 0, 0, GaussianMixture::single(1.0, 1.0).unwrap());
    let before = bank.clone();
    // Only class-0 rows reach N_min.
    let mut m = LogitSetMatrix::new(3, 1000, 0);
    for i in 0..50 {
        m.push(0, &[3.0 + 0.01 * i as f64, -1.0, 0.5]).unwrap();
    }
    let samples = sample_cells(&m, SampleSize::MinCell, 20, &mut rng);
    let cfg = EmConfig {
        k: 1,
        ..EmConfig::default()
    };
    bank.update(Domain::Target, &samples, &cfg).unwrap();
    for c in 0..3 {
        for l in 0..3 {
            let (old, new) = (before.cell(Domain::Target, c, l), bank.cell(Domain::Target, c, l));
            if c == 0 {
                assert_ne!(old, new, "({c},{l}) should move");
                assert_eq!(bank.staleness(Domain::Target, c, l), 0);
            } else {
                assert_eq!(old, new, "({c},{l}) should be untouched");
                assert_eq!(bank.staleness(Domain::Target, c, l), before.staleness(Domain::Target, c, l) + 1);
            }
            assert_eq!(before.cell(Domain::Source, c, l), bank.cell(Domain::Source, c, l));
        }
    }
    assert_eq!(before.anchor_pos(), bank.anchor_pos());
}

#[test]
fn offline_estimate_stops_on_drift() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let means = vec![vec![2.0, -1.0], vec![-0.5, 1.5]];
    let batch = normal_cell_dump(&means, 0.6, 800, &mut rng);
    let fit = OfflineFit {
        n_min: 100,
        cell_cap: 10_000,
        tol: 1e-4,
        max_epochs: 200,
        seed: 0,
    };
    let (bank, epochs) = estimate_offline(&batch, &EmConfig::default(), &fit).unwrap();
    assert!(epochs >= 2 && epochs <= 200);
    assert!(bank.missing_cells(Domain::Source).is_empty() && bank.missing_cells(Domain::Target).is_empty());
    let (again, e2) = estimate_offline(&batch, &EmConfig::default(), &fit).unwrap();
    assert_eq!((again, e2), (bank, epochs));
}
