use twinbeam::pipeline::{bootstrap_resample, run_full, simulate_calibration, simulate_experiment, with_threads};
use twinbeam_core::model::{joint_distribution, EffectiveSource};
use twinbeam_core::sampling::{self, ExperimentConfig};

fn config(n: f64, eta: f64, modes: f64, pulses: u64, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(EffectiveSource::new(n, eta, eta, modes).unwrap(), seed);
    cfg.pulses = pulses;
    cfg
}

#[test]
fn parallel_simulation_matches_sequential() {
    let mut cfg = config(0.3, 0.5, 2.0, 300_000, 41);
    cfg.block_size = 10_000;
    cfg.calibration_pulses = 50_000;
    let seq = sampling::simulate_experiment(&cfg).unwrap();
    for threads in [1, 2, 5] {
        let par = with_threads(Some(threads), || simulate_experiment(&cfg)).unwrap().unwrap();
        assert_eq!(par, seq);
        let cal = with_threads(Some(threads), || simulate_calibration(&cfg)).unwrap().unwrap();
        assert_eq!(cal, sampling::simulate_calibration(&cfg).unwrap());
    }
    assert_eq!(seq.total(), cfg.pulses);
}

#[test]
fn resampling_keeps_totals_and_is_seeded() {
    let cfg = config(0.5, 0.5, 1.0, 100_000, 43);
    let hist = simulate_experiment(&cfg).unwrap();
    let a = bootstrap_resample(&hist, 1, 0).unwrap();
    assert_eq!(a.total(), hist.total());
    assert_eq!(a, bootstrap_resample(&hist, 1, 0).unwrap());
    assert_ne!(a, bootstrap_resample(&hist, 1, 1).unwrap());
    for (x, y) in a.counts().iter().zip(hist.counts()) {
        assert!(*y > 0 || *x == 0, "resample left the original support");
    }
}

#[test]
fn lossless_chain_recovers_the_source() {
    let mut cfg = config(0.2, 1.0, 1.0, 10_000_000, 47);
    cfg.calibration_pulses = 0;
    cfg.bootstrap = 0;
    let report = run_full(&cfg).unwrap();
    assert!(report.complete());
    let rho = &report.reconstruction.as_ref().unwrap().rho;
    let truth = joint_distribution(&cfg.source, cfg.n_max);
    let tv: f64 =
        0.5 * rho.probs().as_slice().iter().zip(truth.probs().as_slice()).map(|(a, b)| (a - b).abs()).sum::<f64>();
    assert!(tv <= 1e-3, "tv = {tv}");
}

#[test]
fn identical_configs_give_identical_reports() {
    let mut cfg = config(0.2, 0.3, 4.0, 200_000, 53);
    cfg.calibration_pulses = 100_000;
    cfg.calibration_mean_pairs = 0.008;
    cfg.bootstrap = 5;
    let a = with_threads(Some(1), || run_full(&cfg)).unwrap().unwrap();
    let b = with_threads(Some(3), || run_full(&cfg)).unwrap().unwrap();
    assert_eq!(a, b);
    assert!(a.bootstrap.is_some());
}

#[test]
fn failures_are_reported_not_raised() {
    // Calibration at vanishing intensity sees no single clicks.
    let mut cfg = config(0.2, 0.3, 1.0, 1000, 59);
    cfg.calibration_pulses = 10;
    cfg.calibration_mean_pairs = 1e-12;
    let report = run_full(&cfg).unwrap();
    assert!(!report.complete());
    assert_eq!(report.failures[0].stage, "calibration");
    assert_eq!(report.failures[0].error.kind(), "degenerate_input");
    assert!(report.histogram.is_none());

    cfg.pulses = 0;
    assert!(run_full(&cfg).is_err());
}

#[test]
fn closure_over_modes_and_efficiencies() {
    // Mean photon number 0.3 per arm keeps the 8-path detectors far from
    // saturation; the calibration run is set to 1% single-photon load.
    for (i, &modes) in [1.0, 4.0, 16.0].iter().enumerate() {
        for (j, &eta) in [0.05, 0.3, 1.0].iter().enumerate() {
            let mut cfg = config(0.3 / (modes * eta), eta, modes, 2_000_000, 100 + (3 * i + j) as u64);
            cfg.calibration_mean_pairs = 0.01 / (modes * eta);
            cfg.bootstrap = 30;
            let report = run_full(&cfg).unwrap();
            assert!(report.complete(), "{:?}", report.failures);
            let c = report.characterization.as_ref().unwrap();
            let b = report.bootstrap.as_ref().unwrap();
            let m_hat = *c.m_hat.as_ref().unwrap();
            let eta_hat = c.eta_hat.as_ref().unwrap().value;
            let sm = b.get("M_hat").unwrap().std_err;
            let se = b.get("eta_hat").unwrap().std_err;
            assert!((m_hat - modes).abs() <= 4.0 * sm + 0.01 * modes, "M={modes} eta={eta}: M_hat={m_hat} +- {sm}");
            assert!((eta_hat - eta).abs() <= 4.0 * se + 0.01 * eta, "M={modes} eta={eta}: eta_hat={eta_hat} +- {se}");
        }
    }
}
