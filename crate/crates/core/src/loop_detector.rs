//! Time-multiplexed click detector with `B` binary paths.
//!
//! Photons entering an arm leave through path `i` with probability `w_i`; each
//! path ends on a binary detector, so the observable is the number of paths
//! that received at least one photon. Losses are not modelled here: they are
//! part of the arm transmissions of the source.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::JointDistribution;

/// Number of paths in the standard fiber loop.
pub const DEFAULT_PATHS: usize = 8;

/// Tolerance on `sum w_i = 1` and on response column sums.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Exit probabilities of the `B` paths.
#[derive(Debug, Clone, PartialEq)]
pub struct PathWeights(Vec<f64>);

impl PathWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::validation("at least one path is required"));
        }
        if let Some((i, v)) = w.iter().enumerate().find(|(_, v)| !(**v >= 0.0 && **v <= 1.0)) {
            return Err(Error::validation(format!("path weight w[{i}] = {v} outside [0, 1]")));
        }
        let total = crate::sum::sum(w.iter().copied());
        if !(libm::fabs(total - 1.0) <= STOCHASTIC_TOL) {
            return Err(Error::validation(format!("path weights sum to {total}, expected 1")));
        }
        Ok(PathWeights(w))
    }

    pub fn uniform(paths: usize) -> Result<Self> {
        if paths == 0 {
            return Err(Error::validation("at least one path is required"));
        }
        Ok(PathWeights(vec![1.0 / paths as f64; paths]))
    }

    /// `B`
    pub fn paths(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Conditional click probabilities `P[k][n]`, `0 <= k <= B`, `0 <= n <= n_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorResponse {
    matrix: Matrix,
    weights: Option<PathWeights>,
}

impl DetectorResponse {
    /// Accepts an externally supplied `(B + 1) x (n_max + 1)` matrix after
    /// checking column stochasticity and the lossless-detector structure.
    pub fn from_matrix(matrix: Matrix, weights: Option<PathWeights>) -> Result<Self> {
        let (rows, cols) = (matrix.rows(), matrix.cols());
        if rows < 2 || cols == 0 {
            return Err(Error::dimension(format!("response matrix must be at least 2x1 (got {rows}x{cols})")));
        }
        if let Some(w) = &weights {
            if w.paths() + 1 != rows {
                return Err(Error::dimension(format!("{} path weights do not match {rows} click rows", w.paths())));
            }
        }
        for n in 0..cols {
            let col: Vec<f64> = (0..rows).map(|k| matrix[(k, n)]).collect();
            if col.iter().any(|p| !(*p >= 0.0 && *p <= 1.0)) {
                return Err(Error::validation(format!("column n={n} has entries outside [0, 1]")));
            }
            let total = crate::sum::sum(col.iter().copied());
            if !(libm::fabs(total - 1.0) <= STOCHASTIC_TOL) {
                return Err(Error::validation(format!("column n={n} sums to {total}, expected 1")));
            }
            if let Some(k) = (n + 1..rows).find(|&k| col[k] != 0.0) {
                return Err(Error::validation(format!("P[{k}][{n}] must vanish: cannot click more than photons")));
            }
        }
        if cols > 1 && matrix[(1, 1)] != 1.0 && libm::fabs(matrix[(1, 1)] - 1.0) > STOCHASTIC_TOL {
            return Err(Error::validation("lossless detector requires P[1][1] = 1"));
        }
        Ok(DetectorResponse { matrix, weights })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn weights(&self) -> Option<&PathWeights> {
        self.weights.as_ref()
    }

    /// `B`
    pub fn paths(&self) -> usize {
        self.matrix.rows() - 1
    }

    pub fn n_max(&self) -> usize {
        self.matrix.cols() - 1
    }

    /// `P[k][n]`
    pub fn prob(&self, k: usize, n: usize) -> f64 {
        self.matrix[(k, n)]
    }

    /// The same detector restricted to photon numbers `<= n_max`.
    pub fn truncated(&self, n_max: usize) -> Result<Self> {
        if n_max > self.n_max() {
            return Err(Error::dimension(format!(
                "response covers n <= {} but n_max = {n_max} was requested",
                self.n_max()
            )));
        }
        Ok(DetectorResponse {
            matrix: self.matrix.leading_block(self.matrix.rows(), n_max + 1),
            weights: self.weights.clone(),
        })
    }
}

/// Click-count law of the detector for up to `n_max` photons.
///
/// `P[k][n] = n! [t^n] e_k(e^{w_1 t} - 1, ..., e^{w_B t} - 1)`, where `e_k` is
/// the elementary symmetric polynomial: a photon-to-path assignment with
/// exactly the paths in `S` occupied contributes the product of the
/// `(e^{w_i t} - 1)` series over `S`. The symmetric polynomial is built one
/// path at a time in exponential-coefficient form
///
/// ```text
/// E_i[k][n] = E_{i-1}[k][n] + sum_{p=1..n} C(n, p) w_i^p E_{i-1}[k-1][n-p]
/// ```
///
/// which only adds nonnegative terms. Cost `O(B^2 n_max^2)`.
pub fn response_matrix(weights: &PathWeights, n_max: usize) -> DetectorResponse {
    let b = weights.paths();
    let cols = n_max + 1;
    let binom = binomial_rows(n_max);
    let mut e = Matrix::zeros(b + 1, cols);
    e[(0, 0)] = 1.0;
    for (i, &w) in weights.as_slice().iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let mut w_pow = vec![1.0; cols];
        for p in 1..cols {
            w_pow[p] = w_pow[p - 1] * w;
        }
        let mut next = e.clone();
        for k in 1..=(i + 1).min(b) {
            for n in k..cols {
                let mut acc = 0.0;
                for p in 1..=n {
                    acc += binom[n][p] * w_pow[p] * e[(k - 1, n - p)];
                }
                next[(k, n)] += acc;
            }
        }
        e = next;
    }
    // Rounding can push a certain outcome a few ulps above one.
    e.as_mut_slice().iter_mut().for_each(|v| *v = v.min(1.0));
    DetectorResponse { matrix: e, weights: Some(weights.clone()) }
}

fn binomial_rows(n_max: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n_max + 1);
    for n in 0..=n_max {
        let mut row = vec![1.0; n + 1];
        for p in 1..n {
            row[p] = rows[n - 1][p - 1] + rows[n - 1][p];
        }
        rows.push(row);
    }
    rows
}

/// Draws photon exit paths and reports which paths fired.
#[derive(Debug, Clone)]
pub struct PathSampler {
    cumulative: Vec<f64>,
    last_live: usize,
    stamp: Vec<u64>,
    epoch: u64,
}

impl PathSampler {
    pub fn new(weights: &PathWeights) -> Self {
        let mut acc = 0.0;
        let cumulative: Vec<f64> = weights
            .as_slice()
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        let last_live = weights.as_slice().iter().rposition(|&w| w > 0.0).unwrap_or(0);
        PathSampler { stamp: vec![0; cumulative.len()], cumulative, last_live, epoch: 0 }
    }

    pub fn paths(&self) -> usize {
        self.cumulative.len()
    }

    fn draw_path<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        self.cumulative.partition_point(|&c| c <= u).min(self.last_live)
    }

    /// Number of occupied paths after sending `photons` photons.
    pub fn clicks<R: Rng + ?Sized>(&mut self, photons: u64, rng: &mut R) -> usize {
        self.epoch += 1;
        let mut fired = 0;
        for _ in 0..photons {
            let i = self.draw_path(rng);
            if self.stamp[i] != self.epoch {
                self.stamp[i] = self.epoch;
                fired += 1;
            }
        }
        fired
    }

    /// The occupied path if exactly one path fired, as seen by a
    /// time-resolved calibration run.
    pub fn single_path<R: Rng + ?Sized>(&mut self, photons: u64, rng: &mut R) -> Option<usize> {
        let mut only = None;
        for _ in 0..photons {
            let i = self.draw_path(rng);
            match only {
                None => only = Some(i),
                Some(j) if j == i => {}
                Some(_) => return None,
            }
        }
        only
    }
}

/// Monte Carlo counterpart of [`response_matrix`]: clicks produced by `n` photons.
pub fn simulate_clicks<R: Rng + ?Sized>(n: u64, weights: &PathWeights, rng: &mut R) -> usize {
    PathSampler::new(weights).clicks(n, rng)
}

/// Path weights estimated from single-photon calibration data.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub weights: PathWeights,
    /// Binomial standard error `sqrt(w (1 - w) / total)` per path.
    pub std_errors: Vec<f64>,
    pub total: u64,
}

/// Maximum-likelihood path weights from per-path single-click counts, valid
/// when events with two or more photons are negligible.
pub fn calibrate(bin_counts: &[u64]) -> Result<CalibrationReport> {
    if bin_counts.is_empty() {
        return Err(Error::validation("calibration needs at least one path"));
    }
    let total: u64 = bin_counts.iter().sum();
    if total == 0 {
        return Err(Error::degenerate("all calibration counts are zero"));
    }
    let t = total as f64;
    let w: Vec<f64> = bin_counts.iter().map(|&c| c as f64 / t).collect();
    let std_errors = w.iter().map(|&p| libm::sqrt(p * (1.0 - p) / t)).collect();
    Ok(CalibrationReport { weights: PathWeights::new(w)?, std_errors, total })
}

/// Joint click probabilities `p[k][l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClickDistribution {
    probs: Matrix,
    deficit: f64,
}

impl ClickDistribution {
    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    pub fn get(&self, k: usize, l: usize) -> f64 {
        self.probs[(k, l)]
    }

    /// Probability mass missing because of photon-number truncation.
    pub fn deficit(&self) -> f64 {
        self.deficit
    }
}

/// `p = P rho P'^T` restricted to `rho`'s grid.
pub(crate) fn forward(p_a: &Matrix, rho: &Matrix, p_b: &Matrix) -> Matrix {
    let (ka, kb, grid) = (p_a.rows(), p_b.rows(), rho.rows());
    // tmp[k][m] = sum_n P[k][n] rho[n][m]
    let mut tmp = Matrix::zeros(ka, grid);
    for k in 0..ka {
        for n in 0..grid {
            let pk = p_a[(k, n)];
            if pk == 0.0 {
                continue;
            }
            for m in 0..grid {
                tmp[(k, m)] += pk * rho[(n, m)];
            }
        }
    }
    let mut out = Matrix::zeros(ka, kb);
    for k in 0..ka {
        for l in 0..kb {
            let mut acc = 0.0;
            for m in 0..grid {
                acc += tmp[(k, m)] * p_b[(l, m)];
            }
            out[(k, l)] = acc;
        }
    }
    out
}

/// Click statistics produced by photon statistics `rho` through the two detectors.
pub fn apply_response(
    rho: &JointDistribution,
    resp_a: &DetectorResponse,
    resp_b: &DetectorResponse,
) -> Result<ClickDistribution> {
    let n_max = rho.n_max();
    for (name, r) in [("a", resp_a), ("b", resp_b)] {
        if r.n_max() < n_max {
            return Err(Error::dimension(format!(
                "response of arm {name} covers n <= {} but rho needs n <= {n_max}",
                r.n_max()
            )));
        }
    }
    let p_a = resp_a.matrix.leading_block(resp_a.matrix.rows(), n_max + 1);
    let p_b = resp_b.matrix.leading_block(resp_b.matrix.rows(), n_max + 1);
    let probs = forward(&p_a, rho.probs(), &p_b);
    Ok(ClickDistribution { probs, deficit: rho.tail_mass() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::SmallRng;
    use rand::SeedableRng;

    /// Exhaustive sum over all `B^n` photon-to-path assignments.
    fn brute_force(w: &[f64], n: usize) -> Vec<f64> {
        let b = w.len();
        let mut out = vec![0.0; b + 1];
        let mut assign = vec![0usize; n];
        loop {
            let mut prob = 1.0;
            let mut seen = vec![false; b];
            for &i in &assign {
                prob *= w[i];
                seen[i] = true;
            }
            out[seen.iter().filter(|s| **s).count()] += prob;
            // odometer increment
            let mut pos = 0;
            loop {
                if pos == n {
                    return out;
                }
                assign[pos] += 1;
                if assign[pos] < b {
                    break;
                }
                assign[pos] = 0;
                pos += 1;
            }
        }
    }

    /// `C(B, k) sum_j (-1)^j C(k, j) ((k - j)/B)^n`
    fn uniform_closed_form(b: usize, k: usize, n: usize) -> f64 {
        let c = |n: usize, r: usize| -> f64 { (0..r).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64) };
        let mut s = 0.0;
        for j in 0..=k {
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            s += sign * c(k, j) * libm::pow((k - j) as f64 / b as f64, n as f64);
        }
        c(b, k) * s
    }

    #[test]
    fn uniform_eight_paths_known_values() {
        let r = response_matrix(&PathWeights::uniform(8).unwrap(), 10);
        assert_eq!(r.prob(0, 0), 1.0);
        assert!(libm::fabs(r.prob(1, 1) - 1.0) < 1e-15);
        assert!(libm::fabs(r.prob(2, 2) - 7.0 / 8.0) < 1e-15);
        assert!(libm::fabs(r.prob(1, 2) - 1.0 / 8.0) < 1e-15);
        for n in 0..=10 {
            for k in 0..=8 {
                assert!(libm::fabs(r.prob(k, n) - uniform_closed_form(8, k, n)) < 1e-12, "k={k} n={n}");
            }
        }
    }

    #[test]
    fn single_binary_detector_saturates() {
        let r = response_matrix(&PathWeights::uniform(1).unwrap(), 30);
        assert_eq!(r.prob(0, 0), 1.0);
        for n in 1..=30 {
            assert!(libm::fabs(r.prob(1, n) - 1.0) < 1e-15);
        }
    }

    #[test]
    fn non_uniform_matches_enumeration() {
        let w = PathWeights::new(vec![0.3, 0.05, 0.1, 0.2, 0.0, 0.15, 0.12, 0.08]).unwrap();
        let r = response_matrix(&w, 6);
        for n in 0..=6 {
            let bf = brute_force(w.as_slice(), n);
            for (k, expected) in bf.iter().enumerate() {
                assert!(libm::fabs(r.prob(k, n) - expected) <= 1e-12, "k={k} n={n}");
            }
        }
    }

    #[test]
    fn zero_weight_path_never_fires() {
        let w = PathWeights::new(vec![0.5, 0.5, 0.0]).unwrap();
        let r = response_matrix(&w, 12);
        for n in 0..=12 {
            assert_eq!(r.prob(3, n), 0.0);
        }
    }

    #[test]
    fn weights_validation() {
        assert!(PathWeights::new(vec![]).is_err());
        assert!(PathWeights::new(vec![0.5, 0.6]).is_err());
        assert!(PathWeights::new(vec![1.2, -0.2]).is_err());
        assert!(PathWeights::uniform(0).is_err());
    }

    #[test]
    fn from_matrix_checks_structure() {
        let good = response_matrix(&PathWeights::uniform(4).unwrap(), 5);
        assert!(DetectorResponse::from_matrix(good.matrix().clone(), None).is_ok());
        let mut bad = good.matrix().clone();
        bad[(0, 1)] = 0.1;
        assert!(DetectorResponse::from_matrix(bad, None).is_err());
        let mut bad = good.matrix().clone();
        bad[(2, 1)] = 1.0;
        bad[(1, 1)] = 0.0;
        assert!(DetectorResponse::from_matrix(bad, None).is_err());
        assert!(DetectorResponse::from_matrix(good.matrix().clone(), Some(PathWeights::uniform(3).unwrap())).is_err());
    }

    #[test]
    fn simulate_trivial_photon_numbers() {
        let w = PathWeights::uniform(8).unwrap();
        let mut rng = SmallRng::seed_from_u64(7);
        for _ in 0..1000 {
            assert_eq!(simulate_clicks(0, &w, &mut rng), 0);
            assert_eq!(simulate_clicks(1, &w, &mut rng), 1);
        }
    }

    #[test]
    fn simulate_two_photons_on_eight_paths() {
        let w = PathWeights::uniform(8).unwrap();
        let mut sampler = PathSampler::new(&w);
        let mut rng = SmallRng::seed_from_u64(11);
        let trials = 1_000_000u64;
        let hits = (0..trials).filter(|_| sampler.clicks(2, &mut rng) == 2).count() as f64;
        let p = 7.0 / 8.0;
        let sigma = libm::sqrt(p * (1.0 - p) / trials as f64);
        assert!(libm::fabs(hits / trials as f64 - p) <= 3.0 * sigma);
    }

    #[test]
    fn calibrate_examples() {
        let c = calibrate(&[100; 8]).unwrap();
        assert!(c.weights.as_slice().iter().all(|w| *w == 0.125));
        assert_eq!(c.total, 800);
        let c = calibrate(&[200, 100, 100, 100, 100, 100, 100, 0]).unwrap();
        assert_eq!(c.weights.as_slice(), &[0.25, 0.125, 0.125, 0.125, 0.125, 0.125, 0.125, 0.0]);
        assert_eq!(c.std_errors[7], 0.0);
        assert!(libm::fabs(c.std_errors[0] - libm::sqrt(0.25 * 0.75 / 800.0)) < 1e-15);
        assert!(matches!(calibrate(&[0; 8]), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn calibrate_recovers_sampled_weights() {
        let truth = PathWeights::new(vec![0.2, 0.15, 0.1, 0.05, 0.1, 0.15, 0.13, 0.12]).unwrap();
        let mut sampler = PathSampler::new(&truth);
        let mut rng = SmallRng::seed_from_u64(3);
        let mut counts = [0u64; 8];
        for _ in 0..100_000 {
            counts[sampler.single_path(1, &mut rng).unwrap()] += 1;
        }
        let c = calibrate(&counts).unwrap();
        for i in 0..8 {
            let w = truth.as_slice()[i];
            let sigma = libm::sqrt(w * (1.0 - w) / 1e5);
            assert!(libm::fabs(c.weights.as_slice()[i] - w) <= 4.0 * sigma, "bin {i}");
        }
    }

    #[test]
    fn single_path_requires_one_occupied_path() {
        let w = PathWeights::uniform(1).unwrap();
        let mut s = PathSampler::new(&w);
        let mut rng = SmallRng::seed_from_u64(0);
        assert_eq!(s.single_path(0, &mut rng), None);
        assert_eq!(s.single_path(3, &mut rng), Some(0));
    }

    #[test]
    fn apply_response_examples() {
        let resp = response_matrix(&PathWeights::uniform(8).unwrap(), 6);
        let p = apply_response(&JointDistribution::vacuum(6), &resp, &resp).unwrap();
        assert_eq!(p.get(0, 0), 1.0);
        let p = apply_response(&JointDistribution::point(1, 1, 6).unwrap(), &resp, &resp).unwrap();
        assert!(libm::fabs(p.get(1, 1) - 1.0) < 1e-15);
        let short = response_matrix(&PathWeights::uniform(8).unwrap(), 3);
        assert!(matches!(apply_response(&JointDistribution::vacuum(6), &short, &resp), Err(Error::Dimension(_))));
    }

    proptest! {
        #[test]
        fn columns_are_stochastic(raw in proptest::collection::vec(0.0f64..1.0, 1..10), n_max in 0usize..40) {
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 1e-3);
            let w = PathWeights::new(raw.iter().map(|x| x / total).collect()).unwrap();
            let r = response_matrix(&w, n_max);
            for n in 0..=n_max {
                let s: f64 = (0..=w.paths()).map(|k| r.prob(k, n)).sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
                prop_assert!((0..=w.paths()).all(|k| r.prob(k, n) >= 0.0));
            }
        }

        #[test]
        fn permutation_symmetric(raw in proptest::collection::vec(0.01f64..1.0, 2..9), shift in 1usize..8) {
            let total: f64 = raw.iter().sum();
            let w: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let mut rotated = w.clone();
            rotated.rotate_left(shift % w.len());
            let a = response_matrix(&PathWeights::new(w).unwrap(), 15);
            let b = response_matrix(&PathWeights::new(rotated).unwrap(), 15);
            prop_assert!(a.matrix().max_abs_diff(b.matrix()).unwrap() <= 1e-13);
        }
    }
}
