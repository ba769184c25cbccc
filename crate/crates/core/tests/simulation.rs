//! Monte Carlo samplers against the analytic model.

use twinbeam_core::loop_detector::{apply_response, response_matrix, simulate_clicks, PathWeights};
use twinbeam_core::model::{joint_distribution, EffectiveSource};
use twinbeam_core::sampling::{block_rng, simulate_experiment, ExperimentConfig, Phase, PulseSampler};

#[test]
fn click_counts_follow_the_response_matrix() {
    let w = PathWeights::new(vec![0.3, 0.2, 0.1, 0.1, 0.1, 0.1, 0.05, 0.05]).unwrap();
    let resp = response_matrix(&w, 6);
    let mut rng = block_rng(3, Phase::Main, 0);
    let trials = 200_000;
    for n in [1u64, 3, 6] {
        let mut counts = [0u64; 9];
        for _ in 0..trials {
            counts[simulate_clicks(n, &w, &mut rng)] += 1;
        }
        let mut chi2 = 0.0;
        let mut df = 0;
        for (k, &c) in counts.iter().enumerate() {
            let expected = resp.prob(k, n as usize) * trials as f64;
            if expected > 0.0 {
                chi2 += (c as f64 - expected).powi(2) / expected;
                df += 1;
            } else {
                assert_eq!(c, 0, "impossible click count {k} for {n} photons");
            }
        }
        // Far beyond the 0.9999 quantile for at most 6 degrees of freedom.
        assert!(chi2 < 30.0, "n={n} chi2={chi2} df={}", df - 1);
    }
}

#[test]
fn sampled_pulses_match_the_joint_distribution() {
    let src = EffectiveSource::new(1.0, 0.5, 0.7, 2.0).unwrap();
    let sampler = PulseSampler::new(&src).unwrap();
    let n_max = 10;
    let rho = joint_distribution(&src, n_max);
    let trials = 10_000_000u64;
    let mut counts = vec![0u64; (n_max + 1) * (n_max + 1)];
    let mut off_grid = 0u64;
    let mut rng = block_rng(17, Phase::Main, 0);
    for _ in 0..trials {
        let (n, m) = sampler.sample(&mut rng);
        if n as usize <= n_max && m as usize <= n_max {
            counts[n as usize * (n_max + 1) + m as usize] += 1;
        } else {
            off_grid += 1;
        }
    }
    let t = trials as f64;
    for n in 0..=n_max {
        for m in 0..=n_max {
            let p = rho.get(n, m);
            let sigma = (t * p * (1.0 - p)).sqrt();
            let diff = (counts[n * (n_max + 1) + m] as f64 - t * p).abs();
            assert!(diff <= 4.0 * sigma.max(1.0), "cell ({n},{m}): {diff} vs {sigma}");
        }
    }
    let tail = rho.tail_mass();
    assert!((off_grid as f64 - t * tail).abs() <= 4.0 * (t * tail).sqrt().max(1.0));
}

#[test]
fn lossless_coincidences_match_closed_form() {
    // M = 1, N = 1, no loss: rho[n][n] = 2^-(n+1), so p11 = sum_n 2^-(n+1) P[1][n]^2.
    let src = EffectiveSource::new(1.0, 1.0, 1.0, 1.0).unwrap();
    let mut cfg = ExperimentConfig::new(src, 23);
    cfg.pulses = 1_000_000;
    let hist = simulate_experiment(&cfg).unwrap();
    assert_eq!(hist.total(), cfg.pulses);
    let resp = response_matrix(&cfg.weights_a, 60);
    let p11: f64 = (0..=60).map(|n| 0.5f64.powi(n as i32 + 1) * resp.prob(1, n).powi(2)).sum();
    let t = cfg.pulses as f64;
    let sigma = (t * p11 * (1.0 - p11)).sqrt();
    assert!((hist.get(1, 1) as f64 - t * p11).abs() <= 4.0 * sigma);
}

#[test]
fn faint_regime_vacuum_fraction() {
    let modes = 16.0;
    let eta = 0.05;
    let src = EffectiveSource::new(0.15 / (modes * eta), eta, eta, modes).unwrap();
    let mut cfg = ExperimentConfig::new(src, 29);
    cfg.pulses = 1_000_000;
    let hist = simulate_experiment(&cfg).unwrap();
    let rho = joint_distribution(&src, 12);
    let resp = response_matrix(&cfg.weights_a, 12);
    let p00 = apply_response(&rho, &resp, &resp).unwrap().get(0, 0);
    let t = cfg.pulses as f64;
    let sigma = (t * p00 * (1.0 - p00)).sqrt();
    assert!(p00 > 0.7);
    assert!((hist.get(0, 0) as f64 - t * p00).abs() <= 3.0 * sigma);
}

#[test]
fn zero_pulses_are_rejected() {
    let mut cfg = ExperimentConfig::new(EffectiveSource::new(0.1, 0.5, 0.5, 1.0).unwrap(), 1);
    cfg.pulses = 0;
    assert!(cfg.validate().is_err());
    assert!(simulate_experiment(&cfg).is_err());
}

#[test]
fn block_size_does_not_change_totals() {
    let mut cfg = ExperimentConfig::new(EffectiveSource::new(0.4, 0.6, 0.3, 2.0).unwrap(), 31);
    cfg.pulses = 100_001;
    cfg.block_size = 4096;
    let a = simulate_experiment(&cfg).unwrap();
    assert_eq!(a.total(), cfg.pulses);
    assert_eq!(a, simulate_experiment(&cfg).unwrap());
}
