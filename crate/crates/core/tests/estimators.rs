//! Estimators applied to model distributions.

use twinbeam_core::analysis::{
    contamination2, contamination4, contamination_map, delta_squared, mode_number, model_contamination, Arm, PairOrder,
};
use twinbeam_core::model::{joint_distribution_auto, EffectiveSource};

fn rho(n: f64, e: f64, ep: f64, m: f64) -> twinbeam_core::model::JointDistribution {
    joint_distribution_auto(&EffectiveSource::new(n, e, ep, m).unwrap(), 1e-15).unwrap()
}

#[test]
fn mode_number_ignores_pump_and_loss() {
    for &m in &[1.0, 2.5, 7.0] {
        for &n in &[0.02, 0.4, 1.5] {
            for &(e, ep) in &[(1.0, 1.0), (0.2, 0.9)] {
                let r = rho(n, e, ep, m);
                assert!((mode_number(&r, Arm::A).unwrap() - m).abs() < 1e-8 * m);
                assert!((mode_number(&r, Arm::B).unwrap() - m).abs() < 1e-8 * m);
            }
        }
    }
}

#[test]
fn delta_squared_ignores_pump_and_modes() {
    for &(e, ep) in &[(0.3, 0.3), (0.9, 0.4), (1.0, 0.6)] {
        let expected = 1.0 - 2.0 / (1.0 / e + 1.0 / ep);
        for &m in &[1.0, 5.0] {
            for &n in &[0.05, 0.8] {
                assert!((delta_squared(&rho(n, e, ep, m)).unwrap() - expected).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn contamination_rises_with_pump() {
    for &m in &[1.0, 4.0] {
        let mut last2 = 0.0;
        let mut last4 = 0.0;
        for &n in &[0.01, 0.05, 0.2, 0.6] {
            let r = rho(n, 0.4, 0.4, m);
            let e2 = contamination2(&r).unwrap().value;
            let e4 = contamination4(&r).unwrap().value;
            assert!(e2 > last2 && e4 > last4, "M={m} N={n}");
            last2 = e2;
            last4 = e4;
        }
    }
}

#[test]
fn grid_and_model_contamination_agree() {
    let src = EffectiveSource::new(0.3, 0.25, 0.25, 3.0).unwrap();
    let r = joint_distribution_auto(&src, 1e-16).unwrap();
    for order in [PairOrder::Single, PairOrder::Double] {
        let a = twinbeam_core::analysis::contamination(&r, order).unwrap().value;
        let b = model_contamination(&src, order).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn double_pair_map_is_monotone() {
    let etas = [0.1, 0.3, 0.6, 1.0];
    let rates = [1e-6, 1e-5, 1e-4];
    let map = contamination_map(&etas, &rates, 4.0, PairOrder::Double).unwrap();
    for i in 0..etas.len() {
        for j in 0..rates.len() {
            let v = map.get(i, j).expect("reachable");
            if i > 0 {
                assert!(v < map.get(i - 1, j).unwrap());
            }
            if j > 0 {
                assert!(v > map.get(i, j - 1).unwrap());
            }
        }
    }
}

/// `eps2` from the pair-thinning construction, summing the `k + l >= 2`
/// sector cell by cell.
fn eps2_oracle(src: &EffectiveSource) -> f64 {
    let o = twinbeam_core::model::joint_distribution_oracle(src, 10).unwrap();
    let sector: f64 = (0..=10)
        .flat_map(|n| (0..=10).map(move |m| (n, m)))
        .filter(|(n, m)| n + m >= 2)
        .map(|(n, m)| o.get(n, m))
        .sum();
    1.0 - o.get(1, 1) / sector
}

#[test]
fn faint_pump_single_pair_contamination() {
    // To first order in N only two-pair events compete with rho[1][1]:
    // eps2 = N [1 - (1-e)^4 - 4e(1-e)^3 - 4e^2(1-e)^2] / e^2.
    for eta in [0.3, 0.5, 0.9] {
        let n = 1e-6;
        let src = EffectiveSource::new(n, eta, eta, 1.0).unwrap();
        let eps2 = model_contamination(&src, PairOrder::Single).unwrap();
        let oracle = eps2_oracle(&src);
        assert!((eps2 - oracle).abs() < 1e-9 * oracle, "eta={eta}: {eps2} vs {oracle}");
        let q = 1.0 - eta;
        let leading = n * (1.0 - q.powi(4) - 4.0 * eta * q.powi(3) - 4.0 * eta * eta * q * q) / (eta * eta);
        assert!((eps2 / leading - 1.0).abs() < 1e-4, "eta={eta}: {eps2} vs {leading}");
    }
}

#[test]
fn contour_point_matches_oracle() {
    let map = contamination_map(&[0.5], &[1e-2], 1.0, PairOrder::Single).unwrap();
    let n = twinbeam_core::analysis::solve_mean_pairs(0.5, 1.0, PairOrder::Single, 1e-2).unwrap().unwrap();
    let src = EffectiveSource::new(n, 0.5, 0.5, 1.0).unwrap();
    assert!((twinbeam_core::analysis::production_rate(&src, PairOrder::Single) - 1e-2).abs() < 1e-12);
    assert!((map.get(0, 0).unwrap() - eps2_oracle(&src)).abs() < 1e-9);
}
