//! Seeded Monte Carlo of the measurement.
//!
//! Each pulse draws, for every one of the `M` mode pairs, a geometric number
//! of pairs and thins each photon through its arm. Pulses are grouped in
//! fixed-size blocks and block `i` of phase `p` owns the ChaCha stream
//! `(seed, p << 56 | i)`, so results depend only on the configuration and
//! never on how blocks are scheduled.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loop_detector::{PathSampler, PathWeights};
use crate::model::EffectiveSource;
use crate::reconstruction::{ClickHistogram, EmOptions};

/// Random stream family of a simulation phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Phase {
    Main = 0,
    Calibration = 1,
    Bootstrap = 2,
}

/// Counter-based stream for block `index` of `phase`.
pub fn block_rng(seed: u64, phase: Phase, index: u64) -> ChaCha8Rng {
    debug_assert!(index < 1 << 56);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((phase as u64) << 56) | index);
    rng
}

/// Draws `(n, m)` photon numbers per pulse for an integer number of modes.
#[derive(Debug, Clone)]
pub struct PulseSampler {
    modes: u32,
    /// `ln(N / (N + 1))`
    log_ratio: f64,
    eta: f64,
    eta_prime: f64,
}

impl PulseSampler {
    pub fn new(src: &EffectiveSource) -> Result<Self> {
        let modes = src
            .integer_modes()
            .ok_or_else(|| Error::validation(format!("simulation needs integer M (got {})", src.modes())))?;
        Ok(PulseSampler {
            modes,
            log_ratio: -libm::log1p(1.0 / src.mean_pairs()),
            eta: src.eta(),
            eta_prime: src.eta_prime(),
        })
    }

    /// Pair count with `P(j) = N^j / (N + 1)^(j + 1)` by inverse CDF.
    fn pairs<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        // u in (0, 1]; P(j >= k) = q^k <=> u <= q^k
        let u = 1.0 - rng.gen::<f64>();
        let j = libm::floor(libm::log(u) / self.log_ratio);
        if j >= u64::MAX as f64 {
            u64::MAX
        } else {
            j as u64
        }
    }

    fn thin<R: Rng + ?Sized>(j: u64, eta: f64, rng: &mut R) -> u64 {
        if eta >= 1.0 {
            return j;
        }
        (0..j).filter(|_| rng.gen::<f64>() < eta).count() as u64
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (u64, u64) {
        let (mut n, mut m) = (0, 0);
        for _ in 0..self.modes {
            let j = self.pairs(rng);
            if j == 0 {
                continue;
            }
            n += Self::thin(j, self.eta, rng);
            m += Self::thin(j, self.eta_prime, rng);
        }
        (n, m)
    }
}

/// Photon numbers of one pulse.
pub fn sample_pulse<R: Rng + ?Sized>(src: &EffectiveSource, rng: &mut R) -> Result<(u64, u64)> {
    Ok(PulseSampler::new(src)?.sample(rng))
}

/// Everything needed to simulate and analyse one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub source: EffectiveSource,
    pub pulses: u64,
    pub weights_a: PathWeights,
    pub weights_b: PathWeights,
    pub seed: u64,
    pub calibration_pulses: u64,
    /// Pair number used for the low-intensity calibration run.
    pub calibration_mean_pairs: f64,
    pub n_max: usize,
    pub tol: f64,
    pub max_iter: usize,
    /// Bootstrap replicas for error bars; zero disables them.
    pub bootstrap: usize,
    pub block_size: u64,
}

impl ExperimentConfig {
    pub const DEFAULT_PULSES: u64 = 10_000_000;
    pub const DEFAULT_CALIBRATION_PULSES: u64 = 1_000_000;
    pub const DEFAULT_CALIBRATION_MEAN_PAIRS: f64 = 1e-4;
    pub const DEFAULT_BOOTSTRAP: usize = 100;
    pub const DEFAULT_BLOCK_SIZE: u64 = 1 << 16;

    /// Defaults: uniform 8-path detectors, `n_max = 8`, EM tolerance `1e-10`.
    pub fn new(source: EffectiveSource, seed: u64) -> Self {
        let w = PathWeights::uniform(crate::loop_detector::DEFAULT_PATHS).expect("8 > 0");
        ExperimentConfig {
            source,
            pulses: Self::DEFAULT_PULSES,
            weights_a: w.clone(),
            weights_b: w,
            seed,
            calibration_pulses: Self::DEFAULT_CALIBRATION_PULSES,
            calibration_mean_pairs: Self::DEFAULT_CALIBRATION_MEAN_PAIRS,
            n_max: crate::loop_detector::DEFAULT_PATHS,
            tol: EmOptions::DEFAULT_TOL,
            max_iter: EmOptions::DEFAULT_MAX_ITER,
            bootstrap: Self::DEFAULT_BOOTSTRAP,
            block_size: Self::DEFAULT_BLOCK_SIZE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pulses == 0 {
            return Err(Error::validation("pulses must be > 0"));
        }
        if self.block_size == 0 {
            return Err(Error::validation("block_size must be > 0"));
        }
        PulseSampler::new(&self.source)?;
        self.calibration_source()?;
        if !(self.tol >= 0.0) {
            return Err(Error::validation(format!("tol = {} must be >= 0", self.tol)));
        }
        Ok(())
    }

    pub fn calibration_source(&self) -> Result<EffectiveSource> {
        self.source.with_mean_pairs(self.calibration_mean_pairs)
    }

    pub fn em_options(&self) -> EmOptions {
        EmOptions { n_max: self.n_max, tol: self.tol, max_iter: self.max_iter }
    }

    /// Non-fatal concerns about the configuration.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        let s = &self.source;
        let load = self.calibration_mean_pairs * s.modes() * s.eta().max(s.eta_prime());
        if load > 0.01 {
            out.push(format!(
                "calibration intensity N*M*eta = {load} > 0.01: multiphoton events bias the path weights"
            ));
        }
        if self.n_max > self.weights_a.paths().min(self.weights_b.paths()) {
            out.push(format!(
                "n_max = {} exceeds the number of paths; photon numbers above it are not identifiable",
                self.n_max
            ));
        }
        out
    }

    /// `(index, len)` of every block covering `total` pulses.
    pub fn blocks(&self, total: u64) -> impl Iterator<Item = (u64, u64)> + '_ {
        let size = self.block_size;
        let count = total.div_ceil(size);
        (0..count).map(move |i| (i, size.min(total - i * size)))
    }
}

/// Click histogram of one block of the main run.
pub fn simulate_block(cfg: &ExperimentConfig, index: u64, pulses: u64) -> Result<ClickHistogram> {
    let source = PulseSampler::new(&cfg.source)?;
    let mut det_a = PathSampler::new(&cfg.weights_a);
    let mut det_b = PathSampler::new(&cfg.weights_b);
    let mut rng = block_rng(cfg.seed, Phase::Main, index);
    let mut hist = ClickHistogram::zeros(det_a.paths(), det_b.paths(), pulses.max(1))?;
    for _ in 0..pulses {
        let (n, m) = source.sample(&mut rng);
        let k = det_a.clicks(n, &mut rng);
        let l = det_b.clicks(m, &mut rng);
        hist.record(k, l);
    }
    Ok(hist)
}

/// Whole main run, block by block.
pub fn simulate_experiment(cfg: &ExperimentConfig) -> Result<ClickHistogram> {
    cfg.validate()?;
    let mut hist: Option<ClickHistogram> = None;
    for (index, len) in cfg.blocks(cfg.pulses) {
        let block = simulate_block(cfg, index, len)?;
        match &mut hist {
            None => hist = Some(block),
            Some(h) => h.merge(&block)?,
        }
    }
    Ok(hist.expect("pulses > 0 gives at least one block"))
}

/// Per-path single-click tallies for both arms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CalibrationTallies {
    pub arm_a: Vec<u64>,
    pub arm_b: Vec<u64>,
}

impl CalibrationTallies {
    pub fn merge(&mut self, other: &CalibrationTallies) {
        self.arm_a.iter_mut().zip(&other.arm_a).for_each(|(a, b)| *a += b);
        self.arm_b.iter_mut().zip(&other.arm_b).for_each(|(a, b)| *a += b);
    }
}

/// Tallies of one block of the low-intensity calibration run: an event counts
/// for path `i` when exactly that path fired in the arm.
pub fn calibration_block(cfg: &ExperimentConfig, index: u64, pulses: u64) -> Result<CalibrationTallies> {
    let source = PulseSampler::new(&cfg.calibration_source()?)?;
    let mut det_a = PathSampler::new(&cfg.weights_a);
    let mut det_b = PathSampler::new(&cfg.weights_b);
    let mut rng = block_rng(cfg.seed, Phase::Calibration, index);
    let mut t = CalibrationTallies { arm_a: vec![0; det_a.paths()], arm_b: vec![0; det_b.paths()] };
    for _ in 0..pulses {
        let (n, m) = source.sample(&mut rng);
        if let Some(i) = det_a.single_path(n, &mut rng) {
            t.arm_a[i] += 1;
        }
        if let Some(i) = det_b.single_path(m, &mut rng) {
            t.arm_b[i] += 1;
        }
    }
    Ok(t)
}

/// Whole calibration run, block by block.
pub fn simulate_calibration(cfg: &ExperimentConfig) -> Result<CalibrationTallies> {
    cfg.validate()?;
    let mut total = CalibrationTallies { arm_a: vec![0; cfg.weights_a.paths()], arm_b: vec![0; cfg.weights_b.paths()] };
    for (index, len) in cfg.blocks(cfg.calibration_pulses) {
        total.merge(&calibration_block(cfg, index, len)?);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn src(n: f64, e: f64, ep: f64, m: f64) -> EffectiveSource {
        EffectiveSource::new(n, e, ep, m).unwrap()
    }

    #[test]
    fn faint_source_is_mostly_vacuum() {
        let s = PulseSampler::new(&src(1e-9, 0.5, 0.5, 4.0)).unwrap();
        let mut rng = block_rng(1, Phase::Main, 0);
        assert!((0..100_000).all(|_| s.sample(&mut rng) == (0, 0)));
    }

    #[test]
    fn lossless_pairs_are_balanced() {
        let s = PulseSampler::new(&src(2.0, 1.0, 1.0, 1.0)).unwrap();
        let mut rng = block_rng(2, Phase::Main, 0);
        for _ in 0..10_000 {
            let (n, m) = s.sample(&mut rng);
            assert_eq!(n, m);
        }
    }

    #[test]
    fn geometric_mean_matches() {
        let n_mean = 0.8;
        let s = PulseSampler::new(&src(n_mean, 1.0, 1.0, 1.0)).unwrap();
        let mut rng = block_rng(3, Phase::Main, 0);
        let trials = 200_000;
        let total: u64 = (0..trials).map(|_| s.sample(&mut rng).0).sum();
        let mean = total as f64 / trials as f64;
        let sigma = libm::sqrt(n_mean * (n_mean + 1.0) / trials as f64);
        assert!((mean - n_mean).abs() <= 4.0 * sigma);
    }

    #[test]
    fn non_integer_modes_rejected() {
        assert!(PulseSampler::new(&src(1.0, 1.0, 1.0, 16.6)).is_err());
        let mut rng = block_rng(0, Phase::Main, 0);
        assert!(sample_pulse(&src(1.0, 1.0, 1.0, 1.5), &mut rng).is_err());
    }

    #[test]
    fn streams_differ_by_phase_and_block() {
        let a: u64 = block_rng(5, Phase::Main, 0).gen();
        let b: u64 = block_rng(5, Phase::Main, 1).gen();
        let c: u64 = block_rng(5, Phase::Calibration, 0).gen();
        let again: u64 = block_rng(5, Phase::Main, 0).gen();
        assert_eq!(a, again);
        assert!(a != b && a != c && b != c);
    }

    #[test]
    fn histogram_totals_and_determinism() {
        let mut cfg = ExperimentConfig::new(src(0.3, 0.5, 0.6, 2.0), 99);
        cfg.pulses = 100_001;
        cfg.block_size = 10_000;
        let h = simulate_experiment(&cfg).unwrap();
        assert_eq!(h.total(), cfg.pulses);
        assert_eq!(h.pulses(), cfg.pulses);
        assert_eq!(h, simulate_experiment(&cfg).unwrap());
        cfg.pulses = 0;
        assert!(simulate_experiment(&cfg).is_err());
    }

    #[test]
    fn calibration_warning() {
        let mut cfg = ExperimentConfig::new(src(0.3, 0.5, 0.5, 16.0), 1);
        assert!(cfg.warnings().is_empty());
        cfg.calibration_mean_pairs = 0.1;
        assert_eq!(cfg.warnings().len(), 1);
    }
}
