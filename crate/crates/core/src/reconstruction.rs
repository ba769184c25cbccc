//! Maximum-likelihood inversion of joint click histograms.
//!
//! Click probabilities are linear in the photon statistics,
//! `p[k][l] = sum P[k][n] P'[l][m] rho[n][m]`, and the observed histogram is a
//! multinomial sample of `p`. The multiplicative EM update
//!
//! ```text
//! rho[n][m] <- rho[n][m] * sum_{k,l} P[k][n] P'[l][m] f[k][l] / (F p[k][l])
//! ```
//!
//! keeps `rho` nonnegative and normalized and never decreases the likelihood.
//!
//! With `n_max > B` the map from `rho` to `p` has more unknowns than
//! observable cells and the likelihood is flat along its null directions:
//! photon numbers above the number of paths are not identifiable, and the
//! reconstruction there reflects the starting point as much as the data.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::loop_detector::{forward, DetectorResponse};
use crate::matrix::Matrix;
use crate::model::JointDistribution;

/// Joint click counts `f[k][l]` over a known number of pulses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClickHistogram {
    counts: Vec<u64>,
    rows: usize,
    cols: usize,
    pulses: u64,
}

impl ClickHistogram {
    /// `counts` is row-major with `rows = B_a + 1`, `cols = B_b + 1`.
    pub fn new(rows: usize, cols: usize, counts: Vec<u64>, pulses: u64) -> Result<Self> {
        if rows == 0 || cols == 0 || counts.len() != rows * cols {
            return Err(Error::dimension(format!("histogram of {} cells does not fit {rows}x{cols}", counts.len())));
        }
        if pulses == 0 {
            return Err(Error::validation("pulses must be > 0"));
        }
        let total: u64 = counts.iter().sum();
        if total > pulses {
            return Err(Error::validation(format!("histogram holds {total} events but only {pulses} pulses")));
        }
        Ok(ClickHistogram { counts, rows, cols, pulses })
    }

    /// Empty histogram for detectors with `paths_a` and `paths_b` paths.
    pub fn zeros(paths_a: usize, paths_b: usize, pulses: u64) -> Result<Self> {
        Self::new(paths_a + 1, paths_b + 1, alloc::vec![0; (paths_a + 1) * (paths_b + 1)], pulses)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn pulses(&self) -> u64 {
        self.pulses
    }

    pub fn get(&self, k: usize, l: usize) -> u64 {
        self.counts[k * self.cols + l]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one event; the pulse count is unchanged.
    pub fn record(&mut self, k: usize, l: usize) {
        self.counts[k * self.cols + l] += 1;
    }

    /// Cell-wise sum of two histograms with the same shape; pulses add too.
    pub fn merge(&mut self, other: &ClickHistogram) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::dimension("cannot merge histograms of different shapes"));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        self.pulses += other.pulses;
        Ok(())
    }

    fn check_against(&self, resp_a: &DetectorResponse, resp_b: &DetectorResponse) -> Result<()> {
        if self.rows != resp_a.paths() + 1 || self.cols != resp_b.paths() + 1 {
            return Err(Error::dimension(format!(
                "histogram is {}x{} but responses give {}x{} click cells",
                self.rows,
                self.cols,
                resp_a.paths() + 1,
                resp_b.paths() + 1
            )));
        }
        Ok(())
    }
}

/// Output of [`em_reconstruct`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionResult {
    pub rho: JointDistribution,
    /// Log-likelihood of the starting point followed by one entry per iteration.
    pub log_likelihood_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl ReconstructionResult {
    pub fn final_log_likelihood(&self) -> f64 {
        *self.log_likelihood_trace.last().expect("trace holds at least the starting point")
    }
}

/// Stopping rule and grid for [`em_reconstruct`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmOptions {
    pub n_max: usize,
    /// Stop once `|L_new - L_old| <= tol |L_new|`.
    pub tol: f64,
    pub max_iter: usize,
}

impl EmOptions {
    pub const DEFAULT_TOL: f64 = 1e-10;
    pub const DEFAULT_MAX_ITER: usize = 100_000;

    pub fn new(n_max: usize) -> Self {
        EmOptions { n_max, tol: Self::DEFAULT_TOL, max_iter: Self::DEFAULT_MAX_ITER }
    }
}

/// `sum f[k][l] ln p[k][l]`, skipping empty cells.
fn multinomial_log_likelihood(hist: &ClickHistogram, p: &Matrix) -> Result<f64> {
    let mut acc = crate::sum::Compensated::default();
    for k in 0..hist.rows {
        for l in 0..hist.cols {
            let f = hist.get(k, l);
            if f == 0 {
                continue;
            }
            let pk = p[(k, l)];
            if !(pk > 0.0) {
                return Err(Error::Support { k, l, count: f });
            }
            acc.add(f as f64 * libm::log(pk));
        }
    }
    Ok(acc.value())
}

/// Multinomial log-likelihood of `hist` under the click law induced by `rho`.
pub fn log_likelihood(
    hist: &ClickHistogram,
    rho: &JointDistribution,
    resp_a: &DetectorResponse,
    resp_b: &DetectorResponse,
) -> Result<f64> {
    hist.check_against(resp_a, resp_b)?;
    let p = crate::loop_detector::apply_response(rho, resp_a, resp_b)?;
    multinomial_log_likelihood(hist, p.probs())
}

/// Frequencies and truncated response matrices shared by every iteration.
struct Problem<'a> {
    hist: &'a ClickHistogram,
    freq: Matrix,
    p_a: Matrix,
    p_b: Matrix,
}

impl<'a> Problem<'a> {
    fn new(
        hist: &'a ClickHistogram,
        resp_a: &DetectorResponse,
        resp_b: &DetectorResponse,
        n_max: usize,
    ) -> Result<Self> {
        hist.check_against(resp_a, resp_b)?;
        let total = hist.total();
        if total == 0 {
            return Err(Error::degenerate("histogram holds no events"));
        }
        let p_a = resp_a.truncated(n_max)?.matrix().clone();
        let p_b = resp_b.truncated(n_max)?.matrix().clone();
        let inv = 1.0 / total as f64;
        let freq = Matrix::from_fn(hist.rows, hist.cols, |k, l| hist.get(k, l) as f64 * inv);
        Ok(Problem { hist, freq, p_a, p_b })
    }

    fn clicks(&self, rho: &Matrix) -> Matrix {
        forward(&self.p_a, rho, &self.p_b)
    }

    /// One EM update given the click law `p` of the current `rho`.
    fn step(&self, rho: &Matrix, p: &Matrix) -> Matrix {
        let (ka, kb, grid) = (self.p_a.rows(), self.p_b.rows(), rho.rows());
        let ratio = Matrix::from_fn(ka, kb, |k, l| {
            let f = self.freq[(k, l)];
            if f == 0.0 {
                0.0
            } else {
                f / p[(k, l)]
            }
        });
        // tmp[k][m] = sum_l ratio[k][l] P'[l][m]
        let mut tmp = Matrix::zeros(ka, grid);
        for k in 0..ka {
            for l in 0..kb {
                let r = ratio[(k, l)];
                if r == 0.0 {
                    continue;
                }
                for m in 0..grid {
                    tmp[(k, m)] += r * self.p_b[(l, m)];
                }
            }
        }
        let mut next = Matrix::zeros(grid, grid);
        for n in 0..grid {
            for m in 0..grid {
                let cur = rho[(n, m)];
                if cur == 0.0 {
                    continue;
                }
                let mut g = 0.0;
                for k in 0..ka {
                    g += self.p_a[(k, n)] * tmp[(k, m)];
                }
                next[(n, m)] = cur * g;
            }
        }
        let total = next.sum();
        next.as_mut_slice().iter_mut().for_each(|v| *v /= total);
        next
    }
}

/// Applies a single EM update to `rho`.
pub fn em_step(
    hist: &ClickHistogram,
    rho: &JointDistribution,
    resp_a: &DetectorResponse,
    resp_b: &DetectorResponse,
) -> Result<JointDistribution> {
    let problem = Problem::new(hist, resp_a, resp_b, rho.n_max())?;
    let p = problem.clicks(rho.probs());
    multinomial_log_likelihood(hist, &p)?;
    JointDistribution::normalized(problem.step(rho.probs(), &p))
}

/// Maximum-likelihood `rho` on the `(n_max + 1)^2` grid, starting from the
/// uniform distribution.
///
/// Hitting `max_iter` is not an error: the result carries `converged = false`.
pub fn em_reconstruct(
    hist: &ClickHistogram,
    resp_a: &DetectorResponse,
    resp_b: &DetectorResponse,
    opts: &EmOptions,
) -> Result<ReconstructionResult> {
    let grid = opts.n_max + 1;
    let start = Matrix::from_fn(grid, grid, |_, _| 1.0 / (grid * grid) as f64);
    run_em(hist, resp_a, resp_b, start, opts)
}

/// Like [`em_reconstruct`] but iterating from `start`, whose grid sets
/// `n_max`. Cells where `start` is zero stay zero.
pub fn em_reconstruct_from(
    hist: &ClickHistogram,
    resp_a: &DetectorResponse,
    resp_b: &DetectorResponse,
    start: &JointDistribution,
    tol: f64,
    max_iter: usize,
) -> Result<ReconstructionResult> {
    let opts = EmOptions { n_max: start.n_max(), tol, max_iter };
    let mut init = start.probs().clone();
    let total = init.sum();
    init.as_mut_slice().iter_mut().for_each(|v| *v /= total);
    run_em(hist, resp_a, resp_b, init, &opts)
}

fn run_em(
    hist: &ClickHistogram,
    resp_a: &DetectorResponse,
    resp_b: &DetectorResponse,
    mut rho: Matrix,
    opts: &EmOptions,
) -> Result<ReconstructionResult> {
    if !(opts.tol >= 0.0) {
        return Err(Error::validation(format!("tolerance {} must be >= 0", opts.tol)));
    }
    let problem = Problem::new(hist, resp_a, resp_b, opts.n_max)?;
    let mut p = problem.clicks(&rho);
    let mut ll = multinomial_log_likelihood(problem.hist, &p)?;
    let mut trace = alloc::vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        rho = problem.step(&rho, &p);
        p = problem.clicks(&rho);
        let next = multinomial_log_likelihood(problem.hist, &p)?;
        trace.push(next);
        iterations += 1;
        let gain = libm::fabs(next - ll);
        ll = next;
        if gain <= opts.tol * libm::fabs(next) {
            converged = true;
            break;
        }
    }
    Ok(ReconstructionResult {
        rho: JointDistribution::normalized(rho)?,
        log_likelihood_trace: trace,
        iterations,
        converged,
    })
}
