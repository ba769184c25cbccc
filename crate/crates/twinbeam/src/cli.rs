//! Command-line front end.
//!
//! Every subcommand first echoes its resolved settings as `key=value` lines on
//! standard output. Failures print a single `error: kind=<kind> message=<text>`
//! line on standard error; exit codes are 2 for usage, 3 for invalid input and
//! 4 for numerical failures.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use twinbeam_core::analysis::{characterize, contamination_map, PairOrder};
use twinbeam_core::loop_detector::{response_matrix, PathWeights};
use twinbeam_core::model::{joint_distribution, joint_distribution_bounded, EffectiveSource, DEFAULT_TAIL_BOUND};
use twinbeam_core::reconstruction::{em_reconstruct, EmOptions};

use crate::error::{Error, Result};
use crate::formats::{self, fmt_f64};
use crate::pipeline;

#[derive(Debug, Parser)]
#[command(
    name = "twinbeam",
    version,
    about = "Multimode twin-beam photon statistics: model, simulation, reconstruction and analysis"
)]
pub struct Cli {
    /// Worker threads for simulation and bootstrap; never changes results.
    #[arg(long, global = true, env = "TWINBEAM_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the joint photon-number distribution of an effective source.
    Model(ModelArgs),
    /// Simulate a click histogram from an experiment configuration.
    Simulate(SimulateArgs),
    /// Maximum-likelihood reconstruction of rho from a click histogram.
    Reconstruct(ReconstructArgs),
    /// Estimate source parameters from a rho file.
    Analyze(AnalyzeArgs),
    /// Contamination over an (efficiency, production rate) grid.
    Map(MapArgs),
    /// Calibrate, simulate, reconstruct and characterize in one run.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct SourceArgs {
    /// Mean pair number per mode.
    #[arg(long = "N")]
    pub n: f64,
    /// Efficiency of arm A, in (0, 1].
    #[arg(long)]
    pub eta: f64,
    /// Efficiency of arm B, in (0, 1].
    #[arg(long = "eta-prime")]
    pub eta_prime: f64,
    /// Effective number of modes (real, >= 1).
    #[arg(long = "M")]
    pub m: f64,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    /// Grid size; by default the smallest with tail mass below --tail-bound.
    #[arg(long = "n-max")]
    pub n_max: Option<usize>,
    /// Largest acceptable probability outside the grid.
    #[arg(long = "tail-bound", default_value_t = DEFAULT_TAIL_BOUND)]
    pub tail_bound: f64,
    /// With an explicit --n-max, fail instead of warning when the tail exceeds --tail-bound.
    #[arg(long)]
    pub strict: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Experiment configuration (key=value file).
    #[arg(long)]
    pub config: PathBuf,
    /// Output histogram file.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write arm A's response matrix, built from the configured weights.
    #[arg(long = "response-a-out")]
    pub response_a_out: Option<PathBuf>,
    /// Also write arm B's response matrix, built from the configured weights.
    #[arg(long = "response-b-out")]
    pub response_b_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    /// Click histogram file.
    #[arg(long)]
    pub hist: PathBuf,
    /// Response matrix of arm A; defaults to a uniform detector sized to the histogram.
    #[arg(long = "resp-a")]
    pub resp_a: Option<PathBuf>,
    /// Response matrix of arm B; defaults to a uniform detector sized to the histogram.
    #[arg(long = "resp-b")]
    pub resp_b: Option<PathBuf>,
    /// Largest photon number reconstructed [default: the number of paths, capped by the responses].
    #[arg(long = "n-max")]
    pub n_max: Option<usize>,
    /// Relative log-likelihood change that stops the iteration.
    #[arg(long, default_value_t = EmOptions::DEFAULT_TOL)]
    pub tol: f64,
    #[arg(long = "max-iter", default_value_t = EmOptions::DEFAULT_MAX_ITER)]
    pub max_iter: usize,
    /// Output rho file.
    #[arg(long)]
    pub out: PathBuf,
    /// Run report (iterations, final log-likelihood, converged flag) [default: <out>.report].
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// rho file.
    #[arg(long)]
    pub rho: PathBuf,
    /// Also write the estimates to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MapArgs {
    /// 2 for single-pair, 4 for double-pair contamination.
    #[arg(long, default_value_t = 2)]
    pub which: usize,
    #[arg(long = "M", default_value_t = 1.0)]
    pub m: f64,
    /// Efficiency grid: `a,b,c`, `lin:start:stop:count` or `log:start:stop:count`.
    #[arg(long)]
    pub eta: String,
    /// Production-rate grid, same syntax as --eta.
    #[arg(long)]
    pub rate: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Experiment configuration (key=value file).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long = "out-dir")]
    pub out_dir: PathBuf,
}

/// Parses a grid spec: comma list, `lin:a:b:n` or `log:a:b:n`.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = |why: &str| Error::Usage(format!("grid '{spec}': {why}"));
    let spec = spec.trim();
    if spec.is_empty() {
        return Err(bad("empty"));
    }
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(&format!("'{s}' is not a number")));
    if let Some(rest) = spec.strip_prefix("lin:").or_else(|| spec.strip_prefix("log:")) {
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() != 3 {
            return Err(bad("expected start:stop:count"));
        }
        let (a, b) = (num(parts[0])?, num(parts[1])?);
        let n: usize = parts[2].trim().parse().map_err(|_| bad("count must be a positive integer"))?;
        if n == 0 {
            return Err(bad("count must be a positive integer"));
        }
        let log = spec.starts_with("log:");
        if log && !(a > 0.0 && b > 0.0) {
            return Err(bad("log grid needs positive end points"));
        }
        let (lo, hi) = if log { (a.ln(), b.ln()) } else { (a, b) };
        return Ok((0..n)
            .map(|i| match i {
                0 => a,
                _ if i == n - 1 => b,
                _ => {
                    let x = lo + (hi - lo) * (i as f64 / (n - 1) as f64);
                    if log {
                        x.exp()
                    } else {
                        x
                    }
                }
            })
            .collect());
    }
    spec.split(',').map(num).collect()
}

fn echo(out: &mut dyn Write, pairs: &[(&str, String)]) -> Result<()> {
    for (k, v) in pairs {
        writeln!(out, "{k}={v}").map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(())
}

fn echo_text(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn path(p: &Path) -> String {
    p.display().to_string()
}

fn cmd_model(a: &ModelArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let src = EffectiveSource::new(a.source.n, a.source.eta, a.source.eta_prime, a.source.m)?;
    let n_max = match a.n_max {
        Some(n) => n,
        None => twinbeam_core::model::n_max_for_tail(&src, a.tail_bound)?,
    };
    echo(
        out,
        &[
            ("command", "model".into()),
            ("N", fmt_f64(src.mean_pairs())),
            ("eta", fmt_f64(src.eta())),
            ("eta_prime", fmt_f64(src.eta_prime())),
            ("M", fmt_f64(src.modes())),
            ("n_max", n_max.to_string()),
            ("tail_bound", fmt_f64(a.tail_bound)),
            ("out", path(&a.out)),
        ],
    )?;
    let rho =
        if a.strict { joint_distribution_bounded(&src, n_max, a.tail_bound)? } else { joint_distribution(&src, n_max) };
    if rho.tail_mass() > a.tail_bound {
        let _ = writeln!(
            err,
            "warning: tail_mass {} exceeds tail bound {}",
            fmt_f64(rho.tail_mass()),
            fmt_f64(a.tail_bound)
        );
    }
    formats::write_file(&a.out, &formats::write_joint_distribution(&rho))?;
    echo(out, &[("normalization", fmt_f64(rho.grid_mass())), ("tail_mass", fmt_f64(rho.tail_mass()))])?;
    Ok(())
}

fn cmd_simulate(a: &SimulateArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let cfg = formats::read_experiment_config(&formats::read_file(&a.config)?)?;
    echo(out, &[("command", "simulate".into())])?;
    echo_text(out, &formats::write_experiment_config(&cfg))?;
    echo(out, &[("out", path(&a.out))])?;
    for w in cfg.warnings() {
        let _ = writeln!(err, "warning: {w}");
    }
    let hist = pipeline::simulate_experiment(&cfg)?;
    formats::write_file(&a.out, &formats::write_histogram(&hist))?;
    if let Some(p) = &a.response_a_out {
        formats::write_file(p, &formats::write_detector_response(&response_matrix(&cfg.weights_a, cfg.n_max)))?;
    }
    if let Some(p) = &a.response_b_out {
        formats::write_file(p, &formats::write_detector_response(&response_matrix(&cfg.weights_b, cfg.n_max)))?;
    }
    echo(out, &[("events", hist.total().to_string())])
}

fn cmd_reconstruct(a: &ReconstructArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let hist = formats::read_histogram(&formats::read_file(&a.hist)?)?;
    let paths = hist.rows().min(hist.cols()) - 1;
    let file = |p: &Option<PathBuf>| -> Result<_> {
        p.as_deref().map(|p| formats::read_detector_response(&formats::read_file(p)?)).transpose()
    };
    let (file_a, file_b) = (file(&a.resp_a)?, file(&a.resp_b)?);
    let n_max = a.n_max.unwrap_or_else(|| {
        [&file_a, &file_b].iter().filter_map(|r| r.as_ref().map(|r| r.n_max())).fold(paths, usize::min)
    });
    let uniform = |paths: usize| -> Result<_> { Ok(response_matrix(&PathWeights::uniform(paths)?, n_max)) };
    let resp_a = match file_a {
        Some(r) => r,
        None => uniform(hist.rows() - 1)?,
    };
    let resp_b = match file_b {
        Some(r) => r,
        None => uniform(hist.cols() - 1)?,
    };
    let report_path = a.report.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".report");
        PathBuf::from(s)
    });
    echo(
        out,
        &[
            ("command", "reconstruct".into()),
            ("hist", path(&a.hist)),
            ("resp_a", a.resp_a.as_deref().map(path).unwrap_or_else(|| "uniform".into())),
            ("resp_b", a.resp_b.as_deref().map(path).unwrap_or_else(|| "uniform".into())),
            ("n_max", n_max.to_string()),
            ("tol", fmt_f64(a.tol)),
            ("max_iter", a.max_iter.to_string()),
            ("out", path(&a.out)),
            ("report", path(&report_path)),
        ],
    )?;
    let opts = EmOptions { n_max, tol: a.tol, max_iter: a.max_iter };
    let res = em_reconstruct(&hist, &resp_a, &resp_b, &opts)?;
    formats::write_file(&a.out, &formats::write_joint_distribution(&res.rho))?;
    let report = formats::write_reconstruction_report(&res, a.tol, a.max_iter);
    formats::write_file(&report_path, &report)?;
    echo_text(out, &report)?;
    if !res.converged {
        let _ = writeln!(err, "warning: not converged after {} iterations", res.iterations);
    }
    Ok(())
}

fn cmd_analyze(a: &AnalyzeArgs, out: &mut dyn Write) -> Result<()> {
    let rho = formats::read_joint_distribution(&formats::read_file(&a.rho)?)?;
    echo(out, &[("command", "analyze".into()), ("rho", path(&a.rho)), ("n_max", rho.n_max().to_string())])?;
    let text = formats::write_characterization(&characterize(&rho));
    if let Some(p) = &a.out {
        formats::write_file(p, &text)?;
    }
    echo_text(out, &text)
}

fn cmd_map(a: &MapArgs, out: &mut dyn Write) -> Result<()> {
    let order = PairOrder::from_photons(a.which)?;
    let etas = parse_grid(&a.eta)?;
    let rates = parse_grid(&a.rate)?;
    echo(
        out,
        &[
            ("command", "map".into()),
            ("which", a.which.to_string()),
            ("M", fmt_f64(a.m)),
            ("eta", etas.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(",")),
            ("rate", rates.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(",")),
            ("sentinel", formats::MAP_SENTINEL.into()),
            ("out", path(&a.out)),
        ],
    )?;
    let map = contamination_map(&etas, &rates, a.m, order)?;
    let unreachable = map.values.iter().filter(|v| v.is_none()).count();
    formats::write_file(&a.out, &formats::write_contamination_map(&map))?;
    echo(out, &[("cells", map.values.len().to_string()), ("unreachable", unreachable.to_string())])
}

fn cmd_pipeline(a: &PipelineArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let cfg = formats::read_experiment_config(&formats::read_file(&a.config)?)?;
    echo(out, &[("command", "pipeline".into())])?;
    echo_text(out, &formats::write_experiment_config(&cfg))?;
    echo(out, &[("out_dir", path(&a.out_dir))])?;
    let report = pipeline::run_full(&cfg)?;
    for w in &report.warnings {
        let _ = writeln!(err, "warning: {w}");
    }
    for f in &report.failures {
        let _ = writeln!(err, "warning: stage {} failed: kind={} message={}", f.stage, f.error.kind(), f.error);
    }
    let summary = pipeline::write_report(&report, &a.out_dir)?;
    echo_text(out, &summary)
}

fn dispatch(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    if let Some(t) = cli.threads {
        echo(out, &[("threads", t.to_string())])?;
    }
    match &cli.command {
        Command::Model(a) => cmd_model(a, out, err),
        Command::Simulate(a) => with_pool(cli.threads, |out, err| cmd_simulate(a, out, err), out, err),
        Command::Reconstruct(a) => cmd_reconstruct(a, out, err),
        Command::Analyze(a) => cmd_analyze(a, out),
        Command::Map(a) => cmd_map(a, out),
        Command::Pipeline(a) => with_pool(cli.threads, |out, err| cmd_pipeline(a, out, err), out, err),
    }
}

/// Runs `f` inside a pool of the requested size. Its output is buffered
/// because the caller's writers need not be `Send`.
fn with_pool(
    threads: Option<usize>,
    f: impl FnOnce(&mut dyn Write, &mut dyn Write) -> Result<()> + Send,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<()> {
    let (res, o, e) = pipeline::with_threads(threads, || {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let res = f(&mut o, &mut e);
        (res, o, e)
    })?;
    out.write_all(&o).map_err(|x| Error::io("<stdout>", x))?;
    let _ = err.write_all(&e);
    res
}

/// Parses `args` (including the program name) and runs the command. Returns
/// the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            let _ = writeln!(err, "error: kind=usage message={first}");
            return 2;
        }
    };
    match dispatch(&cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: kind={} message={}", e.kind(), e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}
