//! Forward model of the source.
//!
//! A bank of pairwise-squeezed characteristic modes is filtered down to one
//! mode per arm ([`reduce_multimode`]), mapped onto the effective parameters
//! `(N, eta, eta')` ([`effective_params`]), and `M` identical copies of that
//! reduced state give the joint count generating function
//!
//! ```text
//! Xi(x, y) = [N + 1 - N (eta x + 1 - eta)(eta' y + 1 - eta')]^(-M)
//! ```
//!
//! whose Taylor coefficients are the joint photon-number probabilities.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Tolerance on `sum |t_k|^2 = 1`.
pub const TRANSMISSIVITY_TOL: f64 = 1e-12;

/// Tail bound used when the caller does not choose a truncation order.
pub const DEFAULT_TAIL_BOUND: f64 = 1e-10;

/// Rounding slack when checking `eta, eta' <= 1` on derived values.
pub const EFFICIENCY_TOL: f64 = 1e-12;

/// Largest grid the automatic truncation search will try.
pub const MAX_AUTO_N_MAX: usize = 4096;

/// Characteristic-mode description of the source and of the two filters.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodeSource {
    squeezing: Vec<f64>,
    t: Vec<Complex64>,
    t_prime: Vec<Complex64>,
}

impl MultimodeSource {
    pub fn new(squeezing: Vec<f64>, t: Vec<Complex64>, t_prime: Vec<Complex64>) -> Result<Self> {
        let k = squeezing.len();
        if k == 0 {
            return Err(Error::validation("at least one characteristic mode pair is required"));
        }
        if t.len() != k || t_prime.len() != k {
            return Err(Error::validation(format!(
                "r, t and t' must share one length (got {}, {}, {})",
                k,
                t.len(),
                t_prime.len()
            )));
        }
        if let Some((i, r)) = squeezing.iter().enumerate().find(|(_, r)| !(**r >= 0.0 && r.is_finite())) {
            return Err(Error::validation(format!("squeezing r[{i}] = {r} must be finite and >= 0")));
        }
        for (name, amps) in [("t", &t), ("t'", &t_prime)] {
            let norm: f64 = crate::sum::sum(amps.iter().map(|z| z.norm_sqr()));
            if !(libm::fabs(norm - 1.0) <= TRANSMISSIVITY_TOL) {
                return Err(Error::validation(format!(
                    "sum |{name}_k|^2 = {norm} must equal 1 within {TRANSMISSIVITY_TOL:e}"
                )));
            }
        }
        Ok(MultimodeSource { squeezing, t, t_prime })
    }

    pub fn squeezing(&self) -> &[f64] {
        &self.squeezing
    }

    pub fn t(&self) -> &[Complex64] {
        &self.t
    }

    pub fn t_prime(&self) -> &[Complex64] {
        &self.t_prime
    }
}

/// Second-order moments of the two filtered modes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReducedMoments {
    /// `<a^dag a>`
    pub n_bar: f64,
    /// `<b^dag b>`
    pub n_bar_prime: f64,
    /// `<a b>`
    pub s: Complex64,
}

/// Moments of the filtered modes `a = sum t_k a_k`, `b = sum t'_k b_k`.
///
/// Only the diagonal `k = l` terms of the characteristic-mode moments are
/// nonzero, so each moment is a single sum over mode pairs.
pub fn reduce_multimode(src: &MultimodeSource) -> ReducedMoments {
    let mut n_bar = 0.0;
    let mut n_bar_prime = 0.0;
    let mut s = Complex64::new(0.0, 0.0);
    for ((&r, t), tp) in src.squeezing.iter().zip(&src.t).zip(&src.t_prime) {
        let occupation = (libm::cosh(2.0 * r) - 1.0) / 2.0;
        n_bar += t.norm_sqr() * occupation;
        n_bar_prime += tp.norm_sqr() * occupation;
        s += t * tp * (libm::sinh(2.0 * r) / 2.0);
    }
    ReducedMoments { n_bar, n_bar_prime, s }
}

/// Effective source: `M` identical pair modes, each producing on average
/// `N` photons per arm, seen through arm transmissions `eta` and `eta'`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveSource {
    mean_pairs: f64,
    eta: f64,
    eta_prime: f64,
    modes: f64,
}

impl EffectiveSource {
    /// Checks `N > 0`, `0 < eta, eta' <= 1` and `M >= 1`.
    pub fn new(mean_pairs: f64, eta: f64, eta_prime: f64, modes: f64) -> Result<Self> {
        if !(mean_pairs > 0.0 && mean_pairs.is_finite()) {
            return Err(Error::validation(format!("N = {mean_pairs} must be finite and > 0")));
        }
        for (name, v) in [("eta", eta), ("eta_prime", eta_prime)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::validation(format!("{name} = {v} must lie in (0, 1]")));
            }
        }
        if !(modes >= 1.0 && modes.is_finite()) {
            return Err(Error::validation(format!("M = {modes} must be finite and >= 1")));
        }
        Ok(EffectiveSource { mean_pairs, eta, eta_prime, modes })
    }

    /// Same efficiencies and mode count with a different pair number.
    pub fn with_mean_pairs(&self, mean_pairs: f64) -> Result<Self> {
        EffectiveSource::new(mean_pairs, self.eta, self.eta_prime, self.modes)
    }

    /// `N`: mean photons per mode pair per arm before losses.
    pub fn mean_pairs(&self) -> f64 {
        self.mean_pairs
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn eta_prime(&self) -> f64 {
        self.eta_prime
    }

    /// Equivalent number of mode pairs `M`.
    pub fn modes(&self) -> f64 {
        self.modes
    }

    /// `M` as an integer, if it is one.
    pub fn integer_modes(&self) -> Option<u32> {
        let m = self.modes;
        (m == libm::floor(m) && m <= u32::MAX as f64).then_some(m as u32)
    }

    /// Mean detected photons in arm a, `M N eta`.
    pub fn mean_a(&self) -> f64 {
        self.modes * self.mean_pairs * self.eta
    }

    /// Mean detected photons in arm b, `M N eta'`.
    pub fn mean_b(&self) -> f64 {
        self.modes * self.mean_pairs * self.eta_prime
    }

    fn quadric(&self) -> Quadric {
        let (n, e, ep) = (self.mean_pairs, self.eta, self.eta_prime);
        Quadric { a: n + 1.0 - n * (1.0 - e) * (1.0 - ep), b: n * e * (1.0 - ep), c: n * (1.0 - e) * ep, d: n * e * ep }
    }
}

/// `Xi(x, y) = (a - b x - c y - d x y)^(-M)`, all four coefficients >= 0.
#[derive(Debug, Clone, Copy)]
struct Quadric {
    a: f64,
    b: f64,
    c: f64,
    d: f64,
}

/// Maps reduced moments onto `(N, eta, eta')`; `M` passes through.
pub fn effective_params(mom: &ReducedMoments, modes: f64) -> Result<EffectiveSource> {
    let (n, np) = (mom.n_bar, mom.n_bar_prime);
    if !(n >= 0.0 && np >= 0.0) {
        return Err(Error::validation(format!("mean photon numbers must be >= 0 (got {n}, {np})")));
    }
    let s_sq = mom.s.norm_sqr();
    let product = n * np;
    let excess = s_sq - product;
    if !(excess > 0.0) {
        return Err(Error::ClassicalRegime { s_sq, product });
    }
    if n == 0.0 || np == 0.0 {
        return Err(Error::Physicality(format!("|S|^2 = {s_sq} > 0 with an empty arm (n = {n}, n' = {np})")));
    }
    let eta = excess / np;
    let eta_prime = excess / n;
    if eta > 1.0 + EFFICIENCY_TOL || eta_prime > 1.0 + EFFICIENCY_TOL {
        return Err(Error::Physicality(format!(
            "moments imply eta = {eta}, eta' = {eta_prime}; efficiencies cannot exceed 1"
        )));
    }
    EffectiveSource::new(product / excess, eta.min(1.0), eta_prime.min(1.0), modes)
}

/// Joint count generating function `Xi(x, y)` for `x, y` in `[0, 1]`.
pub fn generating_fn_value(src: &EffectiveSource, x: f64, y: f64) -> Result<f64> {
    if !((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y)) {
        return Err(Error::validation(format!("x = {x}, y = {y} must lie in [0, 1]")));
    }
    // N + 1 - N u v = 1 + N (1 - u v), with 1 - u v written without cancellation
    let (u, v) = (src.eta * (1.0 - x), src.eta_prime * (1.0 - y));
    let single = 1.0 + src.mean_pairs * (u + v - u * v);
    Ok(libm::pow(single, -src.modes))
}

/// Truncated joint photon-number distribution `rho[n][m]`, `0 <= n, m <= n_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDistribution {
    probs: Matrix,
    tail_mass: f64,
}

impl JointDistribution {
    /// Tolerance on `sum rho <= 1` when accepting external data.
    pub const NORMALIZATION_TOL: f64 = 1e-9;

    /// Wraps a square matrix of probabilities; the tail mass is whatever the
    /// entries leave out of 1.
    pub fn from_probs(probs: Matrix) -> Result<Self> {
        if probs.rows() != probs.cols() || probs.rows() == 0 {
            return Err(Error::dimension(format!(
                "joint distribution must be a non-empty square matrix (got {}x{})",
                probs.rows(),
                probs.cols()
            )));
        }
        if let Some(p) = probs.as_slice().iter().find(|p| !(**p >= 0.0 && **p <= 1.0)) {
            return Err(Error::validation(format!("probability {p} outside [0, 1]")));
        }
        let total = probs.sum();
        if total > 1.0 + Self::NORMALIZATION_TOL {
            return Err(Error::validation(format!("probabilities sum to {total} > 1")));
        }
        Ok(JointDistribution { probs, tail_mass: (1.0 - total).max(0.0) })
    }

    /// Probabilities with an explicitly stated tail mass, e.g. read back from
    /// a file. The two must add up to one within [`Self::NORMALIZATION_TOL`].
    pub fn from_parts(probs: Matrix, tail_mass: f64) -> Result<Self> {
        let mut rho = Self::from_probs(probs)?;
        let total = rho.probs.sum();
        if !(tail_mass >= 0.0 && libm::fabs(total + tail_mass - 1.0) <= Self::NORMALIZATION_TOL) {
            return Err(Error::validation(format!("grid mass {total} and tail mass {tail_mass} do not add up to 1")));
        }
        rho.tail_mass = tail_mass;
        Ok(rho)
    }

    /// Like [`from_probs`](Self::from_probs) but rescales the entries to sum to one.
    pub fn normalized(mut probs: Matrix) -> Result<Self> {
        let total = probs.sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::degenerate("cannot normalize a distribution with zero mass"));
        }
        probs.as_mut_slice().iter_mut().for_each(|p| *p /= total);
        let mut rho = Self::from_probs(probs)?;
        rho.tail_mass = 0.0;
        Ok(rho)
    }

    /// Point mass at `(n, m)` on an `(n_max + 1)^2` grid.
    pub fn point(n: usize, m: usize, n_max: usize) -> Result<Self> {
        if n > n_max || m > n_max {
            return Err(Error::dimension(format!("({n}, {m}) outside grid with n_max = {n_max}")));
        }
        let mut probs = Matrix::zeros(n_max + 1, n_max + 1);
        probs[(n, m)] = 1.0;
        Ok(JointDistribution { probs, tail_mass: 0.0 })
    }

    pub fn vacuum(n_max: usize) -> Self {
        JointDistribution::point(0, 0, n_max).expect("origin is always on the grid")
    }

    pub fn n_max(&self) -> usize {
        self.probs.rows() - 1
    }

    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    /// `rho[n][m]`, zero outside the grid.
    pub fn get(&self, n: usize, m: usize) -> f64 {
        self.probs.get(n, m).unwrap_or(0.0)
    }

    /// `1 - sum rho` over the grid, clamped at zero.
    pub fn tail_mass(&self) -> f64 {
        self.tail_mass
    }

    /// Mass on the grid.
    pub fn grid_mass(&self) -> f64 {
        self.probs.sum()
    }

    /// Marginal distribution of arm a (row sums).
    pub fn marginal_a(&self) -> Vec<f64> {
        (0..self.probs.rows()).map(|n| crate::sum::sum(self.probs.row(n).iter().copied())).collect()
    }

    /// Marginal distribution of arm b (column sums).
    pub fn marginal_b(&self) -> Vec<f64> {
        let k = self.probs.rows();
        (0..k).map(|m| crate::sum::sum((0..k).map(|n| self.probs[(n, m)]))).collect()
    }

    /// Power series `sum rho[n][m] x^n y^m` over the grid.
    pub fn truncated_series(&self, x: f64, y: f64) -> f64 {
        let k = self.probs.rows();
        let mut acc = crate::sum::Compensated::default();
        let mut xn = 1.0;
        for n in 0..k {
            let mut ym = 1.0;
            for m in 0..k {
                acc.add(self.probs[(n, m)] * xn * ym);
                ym *= y;
            }
            xn *= x;
        }
        acc.value()
    }
}

/// Taylor coefficients of `Xi(x, y)` on the `(n_max + 1)^2` grid.
///
/// With `Q = a - b x - c y - d x y`, differentiating `Xi = Q^(-M)` gives
/// `Q dXi/dx = M (b + d y) Xi`; matching powers of `x^n y^m` yields
///
/// ```text
/// a (n+1) rho[n+1][m] = (M+n) b rho[n][m] + c (n+1) rho[n+1][m-1] + (M+n) d rho[n][m-1]
/// ```
///
/// and the first row is the negative-binomial series of `(a - c y)^(-M)`.
/// Every update adds nonnegative terms, so there is no cancellation.
pub fn joint_distribution(src: &EffectiveSource, n_max: usize) -> JointDistribution {
    let Quadric { a, b, c, d } = src.quadric();
    let modes = src.modes;
    let k = n_max + 1;
    let mut p = Matrix::zeros(k, k);
    p[(0, 0)] = libm::pow(a, -modes);
    for m in 0..n_max {
        p[(0, m + 1)] = p[(0, m)] * (modes + m as f64) / (m as f64 + 1.0) * (c / a);
    }
    for n in 0..n_max {
        let lead = (modes + n as f64) / (a * (n as f64 + 1.0));
        let side = c / a;
        for m in 0..k {
            let mut v = lead * b * p[(n, m)];
            if m > 0 {
                v += side * p[(n + 1, m - 1)] + lead * d * p[(n, m - 1)];
            }
            p[(n + 1, m)] = v;
        }
    }
    let total = p.sum();
    // 1 - total is only good to rounding; the certified bound is sharper for tiny tails
    let tail_mass = (1.0 - total).max(0.0).min(tail_upper_bound(src, n_max));
    JointDistribution { probs: p, tail_mass }
}

/// [`joint_distribution`] that fails if the certified tail bound exceeds `tail_bound`.
pub fn joint_distribution_bounded(src: &EffectiveSource, n_max: usize, tail_bound: f64) -> Result<JointDistribution> {
    let certified = tail_upper_bound(src, n_max);
    let rho = joint_distribution(src, n_max);
    if certified > tail_bound {
        return Err(Error::Truncation { n_max, tail_mass: rho.tail_mass.max(certified), bound: tail_bound });
    }
    Ok(rho)
}

/// [`joint_distribution`] on the smallest grid whose tail is below `tail_bound`.
pub fn joint_distribution_auto(src: &EffectiveSource, tail_bound: f64) -> Result<JointDistribution> {
    Ok(joint_distribution(src, n_max_for_tail(src, tail_bound)?))
}

/// Certified upper bound on `P(n > n_max or m > n_max)`.
///
/// Each arm's marginal is negative binomial with success ratio
/// `p = N eta / (1 + N eta)`; consecutive terms shrink by
/// `p (M + n) / (n + 1)`, which decreases towards `p < 1`, so the tail past a
/// point where the ratio is below one is bounded by a geometric series.
pub fn tail_upper_bound(src: &EffectiveSource, n_max: usize) -> f64 {
    let arm = |eta: f64| {
        let ne = src.mean_pairs * eta;
        let p = ne / (1.0 + ne);
        let modes = src.modes;
        // t_n = C(n + M - 1, n) (1 - p)^M p^n
        let mut term = libm::pow(1.0 + ne, -modes);
        for n in 0..=n_max {
            term *= p * (modes + n as f64) / (n as f64 + 1.0);
        }
        // term is now t_{n_max + 1}
        let ratio = p * (modes + n_max as f64 + 1.0) / (n_max as f64 + 2.0);
        if ratio < 1.0 {
            term / (1.0 - ratio)
        } else {
            f64::INFINITY
        }
    };
    (arm(src.eta) + arm(src.eta_prime)).min(1.0)
}

/// Smallest `n_max` with [`tail_upper_bound`] at or below `tail_bound`.
pub fn n_max_for_tail(src: &EffectiveSource, tail_bound: f64) -> Result<usize> {
    if !(tail_bound > 0.0) {
        return Err(Error::validation(format!("tail bound {tail_bound} must be > 0")));
    }
    let mut n_max = 0;
    loop {
        let t = tail_upper_bound(src, n_max);
        if t <= tail_bound {
            return Ok(n_max);
        }
        if n_max >= MAX_AUTO_N_MAX {
            return Err(Error::Truncation { n_max, tail_mass: t, bound: tail_bound });
        }
        n_max += 1;
    }
}

/// Default truncation order: tail below [`DEFAULT_TAIL_BOUND`].
pub fn default_n_max(src: &EffectiveSource) -> Result<usize> {
    n_max_for_tail(src, DEFAULT_TAIL_BOUND)
}

/// Pair-count tail cutoff used by the oracle.
const ORACLE_PAIR_TAIL: f64 = 1e-18;

/// Independent construction of `rho[n][m]` from the physical process: per mode
/// pair a geometric number of pairs, each photon surviving its arm with
/// probability `eta` (resp. `eta'`); `M` independent pairs are convolved.
///
/// Requires integer `M`. Serves as the reference for [`joint_distribution`].
pub fn joint_distribution_oracle(src: &EffectiveSource, n_max: usize) -> Result<JointDistribution> {
    let modes =
        src.integer_modes().ok_or_else(|| Error::validation(format!("oracle needs integer M (got {})", src.modes)))?;
    let n = src.mean_pairs;
    let q = n / (n + 1.0);
    // smallest J with q^(J+1) <= ORACLE_PAIR_TAIL, at least n_max
    let cutoff = if q > 0.0 {
        let j = libm::ceil(libm::log(ORACLE_PAIR_TAIL) / libm::log(q)) as usize;
        j.max(n_max)
    } else {
        n_max
    };

    let k = n_max + 1;
    let mut single = Matrix::zeros(k, k);
    let mut row_a = vec![0.0; k];
    let mut row_b = vec![0.0; k];
    row_a[0] = 1.0;
    row_b[0] = 1.0;
    let mut pj = 1.0 / (n + 1.0);
    for j in 0..=cutoff {
        if j > 0 {
            thin_step(&mut row_a, j, src.eta);
            thin_step(&mut row_b, j, src.eta_prime);
            pj *= q;
        }
        for (na, &ba) in row_a.iter().enumerate() {
            if ba == 0.0 {
                continue;
            }
            for (mb, &bb) in row_b.iter().enumerate() {
                single[(na, mb)] += pj * ba * bb;
            }
        }
    }

    let mut probs = single.clone();
    for _ in 1..modes {
        probs = convolve_truncated(&probs, &single);
    }
    let total = probs.sum();
    Ok(JointDistribution { probs, tail_mass: (1.0 - total).max(0.0) })
}

/// Advances `row` from Binomial(j-1, p) to Binomial(j, p), keeping entries `<= n_max`.
fn thin_step(row: &mut [f64], j: usize, p: f64) {
    let top = j.min(row.len() - 1);
    for i in (1..=top).rev() {
        row[i] = row[i] * (1.0 - p) + row[i - 1] * p;
    }
    row[0] *= 1.0 - p;
}

/// Two-dimensional convolution restricted to the common grid.
pub(crate) fn convolve_truncated(x: &Matrix, y: &Matrix) -> Matrix {
    let k = x.rows();
    let mut out = Matrix::zeros(k, k);
    for n1 in 0..k {
        for m1 in 0..k {
            let v = x[(n1, m1)];
            if v == 0.0 {
                continue;
            }
            for n2 in 0..k - n1 {
                for m2 in 0..k - m1 {
                    out[(n1 + n2, m1 + m2)] += v * y[(n2, m2)];
                }
            }
        }
    }
    out
}

/// `(rho[2][0] + rho[0][2]) / rho[1][1]` for a single-mode, equal-loss source:
/// the share of single-pair events mimicked by a double pair losing one arm.
pub fn perturbative_contamination_fraction(src: &EffectiveSource) -> Result<f64> {
    if src.modes != 1.0 {
        return Err(Error::validation(format!("requires M = 1 (got {})", src.modes)));
    }
    if src.eta != src.eta_prime {
        return Err(Error::validation(format!("requires eta = eta' (got {}, {})", src.eta, src.eta_prime)));
    }
    let rho = joint_distribution(src, 2);
    let p11 = rho.get(1, 1);
    if p11 == 0.0 {
        return Err(Error::degenerate("rho[1][1] vanishes"));
    }
    Ok((rho.get(2, 0) + rho.get(0, 2)) / p11)
}
