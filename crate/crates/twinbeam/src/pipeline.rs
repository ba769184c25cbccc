//! Parallel simulation and the full calibrate, simulate, reconstruct and
//! characterize chain.
//!
//! Work is split into the fixed blocks of [`ExperimentConfig::blocks`], each
//! with its own random stream, and merged in block order. Results therefore
//! do not depend on the number of worker threads.

use std::fmt::Write as _;
use std::path::Path;

use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;

use twinbeam_core::analysis::{characterize, SourceCharacterization};
use twinbeam_core::loop_detector::{calibrate, response_matrix, CalibrationReport, DetectorResponse, PathWeights};
use twinbeam_core::reconstruction::{em_reconstruct, em_reconstruct_from, ClickHistogram, ReconstructionResult};
use twinbeam_core::sampling::{self, block_rng, CalibrationTallies, ExperimentConfig, Phase};
use twinbeam_core::Error as CoreError;

use crate::error::{Error, Result};
use crate::formats;

/// Runs `f` on a pool of `threads` workers, or on the global pool if `None`.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(Error::Usage("thread count must be > 0".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Usage(format!("cannot start {n} worker threads: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Main run histogram, blocks simulated in parallel.
pub fn simulate_experiment(cfg: &ExperimentConfig) -> Result<ClickHistogram> {
    cfg.validate()?;
    let blocks: Vec<(u64, u64)> = cfg.blocks(cfg.pulses).collect();
    let parts = blocks
        .par_iter()
        .map(|&(index, len)| sampling::simulate_block(cfg, index, len))
        .collect::<Result<Vec<_>, CoreError>>()?;
    let mut iter = parts.into_iter();
    let mut hist = iter.next().expect("pulses > 0 gives at least one block");
    for block in iter {
        hist.merge(&block)?;
    }
    Ok(hist)
}

/// Calibration tallies, blocks simulated in parallel.
pub fn simulate_calibration(cfg: &ExperimentConfig) -> Result<CalibrationTallies> {
    cfg.validate()?;
    let blocks: Vec<(u64, u64)> = cfg.blocks(cfg.calibration_pulses).collect();
    let parts = blocks
        .par_iter()
        .map(|&(index, len)| sampling::calibration_block(cfg, index, len))
        .collect::<Result<Vec<_>, CoreError>>()?;
    let mut total = CalibrationTallies { arm_a: vec![0; cfg.weights_a.paths()], arm_b: vec![0; cfg.weights_b.paths()] };
    for part in &parts {
        total.merge(part);
    }
    Ok(total)
}

/// Multinomial resample of `hist` with the same number of events, drawn as a
/// chain of binomials on the bootstrap stream `replica`.
pub fn bootstrap_resample(hist: &ClickHistogram, seed: u64, replica: u64) -> Result<ClickHistogram> {
    let mut rng = block_rng(seed, Phase::Bootstrap, replica);
    let mut left_events = hist.total();
    let mut left_weight = hist.total();
    let mut counts = Vec::with_capacity(hist.counts().len());
    for &c in hist.counts() {
        let draw = if left_events == 0 || c == 0 {
            0
        } else if c == left_weight {
            left_events
        } else {
            let p = c as f64 / left_weight as f64;
            Binomial::new(left_events, p).expect("0 < p < 1").sample(&mut rng)
        };
        counts.push(draw);
        left_events -= draw;
        left_weight -= c;
    }
    Ok(ClickHistogram::new(hist.rows(), hist.cols(), counts, hist.pulses())?)
}

/// Spread of one characterization field over bootstrap replicas.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSpread {
    pub key: &'static str,
    pub mean: f64,
    pub std_err: f64,
    /// Replicas where the field was defined.
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapSummary {
    pub replicas: usize,
    pub fields: Vec<FieldSpread>,
}

impl BootstrapSummary {
    pub fn get(&self, key: &str) -> Option<&FieldSpread> {
        self.fields.iter().find(|f| f.key == key)
    }
}

const BOOTSTRAP_KEYS: [&str; 7] = ["M_hat", "eta_hat", "delta_sq", "eps2", "eps4", "mean_n", "mean_n_prime"];

fn field_value(c: &SourceCharacterization, key: &str) -> Option<f64> {
    match key {
        "M_hat" => c.m_hat.clone().ok(),
        "eta_hat" => c.eta_hat.clone().ok().map(|e| e.value),
        "delta_sq" => c.delta_sq.clone().ok(),
        "eps2" => c.eps2.clone().ok().map(|e| e.value),
        "eps4" => c.eps4.clone().ok().map(|e| e.value),
        "mean_n" => c.mean_n.clone().ok(),
        "mean_n_prime" => c.mean_n_prime.clone().ok(),
        _ => None,
    }
}

/// Bootstrap error bars: each replica resamples the histogram and restarts
/// EM from a blend of `fit` and the uniform distribution.
pub fn bootstrap(
    cfg: &ExperimentConfig,
    hist: &ClickHistogram,
    resp_a: &DetectorResponse,
    resp_b: &DetectorResponse,
    fit: &ReconstructionResult,
) -> Result<BootstrapSummary> {
    let grid = fit.rho.n_max() + 1;
    let uniform = 1.0 / (grid * grid) as f64;
    let mut start = fit.rho.probs().clone();
    start.as_mut_slice().iter_mut().for_each(|v| *v = 0.999 * *v + 0.001 * uniform);
    let start = twinbeam_core::model::JointDistribution::normalized(start)?;
    let replicas: Vec<Option<SourceCharacterization>> = (0..cfg.bootstrap as u64)
        .into_par_iter()
        .map(|r| -> Result<Option<SourceCharacterization>> {
            let sample = bootstrap_resample(hist, cfg.seed, r)?;
            Ok(em_reconstruct_from(&sample, resp_a, resp_b, &start, cfg.tol, cfg.max_iter)
                .ok()
                .map(|res| characterize(&res.rho)))
        })
        .collect::<Result<_>>()?;
    let fields = BOOTSTRAP_KEYS
        .iter()
        .map(|&key| {
            let xs: Vec<f64> = replicas.iter().flatten().filter_map(|c| field_value(c, key)).collect();
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
            FieldSpread { key, mean, std_err: var.sqrt(), samples: xs.len() }
        })
        .collect();
    Ok(BootstrapSummary { replicas: cfg.bootstrap, fields })
}

/// A stage that failed, with the reason.
#[derive(Debug, Clone, PartialEq)]
pub struct StageFailure {
    pub stage: &'static str,
    pub error: CoreError,
}

/// Every artifact of [`run_full`]. Stages after a failure are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub config: ExperimentConfig,
    /// Calibrated weights per arm; `None` when the configured weights were used.
    pub calibration: Option<(CalibrationReport, CalibrationReport)>,
    pub responses: Option<(DetectorResponse, DetectorResponse)>,
    pub histogram: Option<ClickHistogram>,
    pub reconstruction: Option<ReconstructionResult>,
    pub characterization: Option<SourceCharacterization>,
    pub bootstrap: Option<BootstrapSummary>,
    pub failures: Vec<StageFailure>,
    pub warnings: Vec<String>,
}

impl RunReport {
    pub fn complete(&self) -> bool {
        self.failures.is_empty()
    }
}

fn lift<T>(r: Result<T>) -> std::result::Result<T, CoreError> {
    r.map_err(|e| match e {
        Error::Core(c) => c,
        other => CoreError::Validation(other.to_string()),
    })
}

/// Calibration, main run, reconstruction, characterization and bootstrap.
///
/// Only an invalid configuration is an error; later failures are recorded in
/// the report and end the chain.
pub fn run_full(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let mut report = RunReport {
        config: cfg.clone(),
        calibration: None,
        responses: None,
        histogram: None,
        reconstruction: None,
        characterization: None,
        bootstrap: None,
        failures: Vec::new(),
        warnings: cfg.warnings(),
    };
    macro_rules! stage {
        ($name:literal, $e:expr) => {
            match $e {
                Ok(v) => v,
                Err(error) => {
                    report.failures.push(StageFailure { stage: $name, error });
                    return Ok(report);
                }
            }
        };
    }

    let (weights_a, weights_b): (PathWeights, PathWeights) = if cfg.calibration_pulses > 0 {
        let tallies = stage!("calibration", lift(simulate_calibration(cfg)));
        let a = stage!("calibration", calibrate(&tallies.arm_a));
        let b = stage!("calibration", calibrate(&tallies.arm_b));
        let w = (a.weights.clone(), b.weights.clone());
        report.calibration = Some((a, b));
        w
    } else {
        (cfg.weights_a.clone(), cfg.weights_b.clone())
    };
    let resp_a = response_matrix(&weights_a, cfg.n_max);
    let resp_b = response_matrix(&weights_b, cfg.n_max);
    report.responses = Some((resp_a.clone(), resp_b.clone()));

    let hist = stage!("simulation", lift(simulate_experiment(cfg)));
    report.histogram = Some(hist.clone());

    let fit = stage!("reconstruction", em_reconstruct(&hist, &resp_a, &resp_b, &cfg.em_options()));
    if !fit.converged {
        report.warnings.push(format!("reconstruction stopped after {} iterations without converging", fit.iterations));
    }
    report.characterization = Some(characterize(&fit.rho));
    report.reconstruction = Some(fit.clone());

    if cfg.bootstrap > 1 {
        report.bootstrap = Some(stage!("bootstrap", lift(bootstrap(cfg, &hist, &resp_a, &resp_b, &fit))));
    }
    Ok(report)
}

fn summary(report: &RunReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "seed={}", report.config.seed);
    let _ = writeln!(out, "complete={}", report.complete());
    for f in &report.failures {
        let _ = writeln!(out, "failure.{}={}: {}", f.stage, f.error.kind(), f.error);
    }
    for (i, w) in report.warnings.iter().enumerate() {
        let _ = writeln!(out, "warning.{i}={w}");
    }
    if let Some(c) = &report.characterization {
        for (k, v) in c.fields() {
            let _ = writeln!(out, "{k}={v}");
        }
    }
    if let Some(b) = &report.bootstrap {
        let _ = writeln!(out, "bootstrap.replicas={}", b.replicas);
        for f in &b.fields {
            let _ = writeln!(out, "{}.std_err={}", f.key, formats::fmt_f64(f.std_err));
        }
    }
    out
}

fn bootstrap_text(b: &BootstrapSummary) -> String {
    let mut out = format!("replicas={}\n", b.replicas);
    for f in &b.fields {
        let _ = writeln!(out, "{}.mean={}", f.key, formats::fmt_f64(f.mean));
        let _ = writeln!(out, "{}.std_err={}", f.key, formats::fmt_f64(f.std_err));
        let _ = writeln!(out, "{}.samples={}", f.key, f.samples);
    }
    out
}

/// Writes the report as a directory of files; returns the summary text.
pub fn write_report(report: &RunReport, dir: &Path) -> Result<String> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let put = |name: &str, text: String| formats::write_file(&dir.join(name), &text);
    put("config.txt", formats::write_experiment_config(&report.config))?;
    if let Some((a, b)) = &report.calibration {
        put("calibration_a.txt", formats::write_calibration(a))?;
        put("calibration_b.txt", formats::write_calibration(b))?;
    }
    if let Some((a, b)) = &report.responses {
        put("response_a.txt", formats::write_detector_response(a))?;
        put("response_b.txt", formats::write_detector_response(b))?;
    }
    if let Some(h) = &report.histogram {
        put("histogram.txt", formats::write_histogram(h))?;
    }
    if let Some(r) = &report.reconstruction {
        put("rho.txt", formats::write_joint_distribution(&r.rho))?;
        put("reconstruction.txt", formats::write_reconstruction_report(r, report.config.tol, report.config.max_iter))?;
    }
    if let Some(c) = &report.characterization {
        put("characterization.txt", formats::write_characterization(c))?;
    }
    if let Some(b) = &report.bootstrap {
        put("bootstrap.txt", bootstrap_text(b))?;
    }
    let text = summary(report);
    put("summary.txt", text.clone())?;
    Ok(text)
}
