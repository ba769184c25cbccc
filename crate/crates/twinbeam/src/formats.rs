//! Plain-text file formats.
//!
//! Matrices are comma-separated rows preceded by `# key=value` header lines;
//! scalar records are `key=value` lines. Floats are written in their shortest
//! round-trip form, switching to exponent notation for very small or very
//! large magnitudes, so a written file reads back to identical values.

use std::fmt::Write as _;
use std::path::Path;

use twinbeam_core::analysis::{ContaminationMap, SourceCharacterization};
use twinbeam_core::loop_detector::{CalibrationReport, DetectorResponse, PathWeights};
use twinbeam_core::model::{EffectiveSource, JointDistribution};
use twinbeam_core::reconstruction::{ClickHistogram, ReconstructionResult};
use twinbeam_core::sampling::ExperimentConfig;
use twinbeam_core::Matrix;

use crate::error::{Error, Result};

/// Written in place of unreachable contamination-map cells.
pub const MAP_SENTINEL: &str = "NaN";

pub fn fmt_f64(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || (1e-5..1e15).contains(&a) || !x.is_finite() {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

fn join_f64(values: &[f64]) -> String {
    values.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(",")
}

pub fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Non-empty lines with their 1-based line numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty())
}

/// `key=value` tokens of a `# ...` header line.
fn header_fields(line_no: usize, line: &str) -> Result<Vec<(String, String)>> {
    let body = line.strip_prefix('#').ok_or_else(|| Error::format(line_no, "expected a '#' header line"))?;
    body.split_whitespace()
        .map(|tok| {
            tok.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::format(line_no, format!("malformed header token '{tok}'")))
        })
        .collect()
}

fn lookup<'a>(fields: &'a [(String, String)], key: &str, line_no: usize) -> Result<&'a str> {
    fields
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::format(line_no, format!("missing '{key}' in header")))
}

fn parse<T: std::str::FromStr>(line_no: usize, what: &str, raw: &str) -> Result<T> {
    raw.trim().parse().map_err(|_| Error::format(line_no, format!("cannot parse {what} from '{raw}'")))
}

fn parse_row<T: std::str::FromStr>(line_no: usize, line: &str, expected: usize) -> Result<Vec<T>> {
    let row: Vec<T> = line.split(',').map(|v| parse(line_no, "matrix entry", v)).collect::<Result<_>>()?;
    if row.len() != expected {
        return Err(Error::format(line_no, format!("expected {expected} entries, found {}", row.len())));
    }
    Ok(row)
}

fn write_matrix(out: &mut String, m: &Matrix) {
    for r in 0..m.rows() {
        out.push_str(&join_f64(m.row(r)));
        out.push('\n');
    }
}

fn read_matrix<'a>(rows_iter: &mut impl Iterator<Item = (usize, &'a str)>, rows: usize, cols: usize) -> Result<Matrix> {
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let (line_no, line) =
            rows_iter.next().ok_or_else(|| Error::format(0, format!("expected {rows} matrix rows, found {r}")))?;
        data.extend(parse_row::<f64>(line_no, line, cols)?);
    }
    if let Some((line_no, _)) = rows_iter.next() {
        return Err(Error::format(line_no, "unexpected trailing content"));
    }
    Ok(Matrix::from_vec(rows, cols, data).expect("row lengths checked"))
}

// ---- joint distribution ------------------------------------------------

pub fn write_joint_distribution(rho: &JointDistribution) -> String {
    let mut out = format!("# n_max={} tail_mass={}\n", rho.n_max(), fmt_f64(rho.tail_mass()));
    write_matrix(&mut out, rho.probs());
    out
}

pub fn read_joint_distribution(text: &str) -> Result<JointDistribution> {
    let mut it = lines(text);
    let (line_no, header) = it.next().ok_or_else(|| Error::format(1, "empty file"))?;
    let fields = header_fields(line_no, header)?;
    let n_max: usize = parse(line_no, "n_max", lookup(&fields, "n_max", line_no)?)?;
    let tail: f64 = parse(line_no, "tail_mass", lookup(&fields, "tail_mass", line_no)?)?;
    let probs = read_matrix(&mut it, n_max + 1, n_max + 1)?;
    Ok(JointDistribution::from_parts(probs, tail)?)
}

// ---- effective source --------------------------------------------------

pub fn write_effective_source(src: &EffectiveSource) -> String {
    format!(
        "N={}\neta={}\neta_prime={}\nM={}\n",
        fmt_f64(src.mean_pairs()),
        fmt_f64(src.eta()),
        fmt_f64(src.eta_prime()),
        fmt_f64(src.modes())
    )
}

/// Ordered `key=value` records; `#` lines are comments.
pub struct KeyValues {
    entries: Vec<(usize, String, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, String, String)> = Vec::new();
        for (line_no, line) in lines(text) {
            if line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(line_no, format!("expected key=value, found '{line}'")))?;
            let key = k.trim().to_string();
            if entries.iter().any(|(_, existing, _)| *existing == key) {
                return Err(Error::format(line_no, format!("duplicate key '{key}'")));
            }
            entries.push((line_no, key, v.trim().to_string()));
        }
        Ok(KeyValues { entries })
    }

    pub fn raw(&self, key: &str) -> Option<(usize, &str)> {
        self.entries.iter().find(|(_, k, _)| k == key).map(|(l, _, v)| (*l, v.as_str()))
    }

    pub fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key).map(|(line, v)| parse(line, key, v)).transpose()
    }

    pub fn require<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?.ok_or_else(|| Error::format(0, format!("missing required key '{key}'")))
    }

    /// Fails on any key outside `allowed`.
    pub fn only(&self, allowed: &[&str]) -> Result<()> {
        match self.entries.iter().find(|(_, k, _)| !allowed.contains(&k.as_str())) {
            Some((line, k, _)) => Err(Error::format(*line, format!("unknown key '{k}'"))),
            None => Ok(()),
        }
    }
}

pub fn read_effective_source(text: &str) -> Result<EffectiveSource> {
    let kv = KeyValues::parse(text)?;
    kv.only(&["N", "eta", "eta_prime", "M"])?;
    Ok(EffectiveSource::new(kv.require("N")?, kv.require("eta")?, kv.require("eta_prime")?, kv.require("M")?)?)
}

// ---- detector response -------------------------------------------------

pub fn write_detector_response(resp: &DetectorResponse) -> String {
    let mut out = format!("# B={} n_max={}\n", resp.paths(), resp.n_max());
    if let Some(w) = resp.weights() {
        let _ = writeln!(out, "# weights={}", join_f64(w.as_slice()));
    }
    write_matrix(&mut out, resp.matrix());
    out
}

pub fn read_detector_response(text: &str) -> Result<DetectorResponse> {
    let mut it = lines(text).peekable();
    let (line_no, header) = it.next().ok_or_else(|| Error::format(1, "empty file"))?;
    let fields = header_fields(line_no, header)?;
    let paths: usize = parse(line_no, "B", lookup(&fields, "B", line_no)?)?;
    let n_max: usize = parse(line_no, "n_max", lookup(&fields, "n_max", line_no)?)?;
    let mut weights = None;
    if let Some(&(line_no, line)) = it.peek() {
        if line.starts_with('#') {
            it.next();
            let f = header_fields(line_no, line)?;
            let w = parse_row::<f64>(line_no, lookup(&f, "weights", line_no)?, paths)?;
            weights = Some(PathWeights::new(w)?);
        }
    }
    let matrix = read_matrix(&mut it, paths + 1, n_max + 1)?;
    Ok(DetectorResponse::from_matrix(matrix, weights)?)
}

// ---- calibration report ------------------------------------------------

pub fn write_calibration(report: &CalibrationReport) -> String {
    let mut out = format!("total={}\npaths={}\n", report.total, report.weights.paths());
    for (i, (w, se)) in report.weights.as_slice().iter().zip(&report.std_errors).enumerate() {
        let _ = writeln!(out, "weight.{i}={}", fmt_f64(*w));
        let _ = writeln!(out, "stderr.{i}={}", fmt_f64(*se));
    }
    out
}

pub fn read_calibration(text: &str) -> Result<CalibrationReport> {
    let kv = KeyValues::parse(text)?;
    let paths: usize = kv.require("paths")?;
    let total: u64 = kv.require("total")?;
    let mut w = Vec::with_capacity(paths);
    let mut se = Vec::with_capacity(paths);
    for i in 0..paths {
        w.push(kv.require(&format!("weight.{i}"))?);
        se.push(kv.require(&format!("stderr.{i}"))?);
    }
    Ok(CalibrationReport { weights: PathWeights::new(w)?, std_errors: se, total })
}

// ---- click histogram ---------------------------------------------------

pub fn write_histogram(hist: &ClickHistogram) -> String {
    let mut out = if hist.rows() == hist.cols() {
        format!("# pulses={} B={}\n", hist.pulses(), hist.rows() - 1)
    } else {
        format!("# pulses={} B={} B_prime={}\n", hist.pulses(), hist.rows() - 1, hist.cols() - 1)
    };
    for row in hist.counts().chunks(hist.cols()) {
        out.push_str(&row.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}

pub fn read_histogram(text: &str) -> Result<ClickHistogram> {
    let mut it = lines(text);
    let (line_no, header) = it.next().ok_or_else(|| Error::format(1, "empty file"))?;
    let fields = header_fields(line_no, header)?;
    let pulses: u64 = parse(line_no, "pulses", lookup(&fields, "pulses", line_no)?)?;
    let b: usize = parse(line_no, "B", lookup(&fields, "B", line_no)?)?;
    let b_prime: usize = match fields.iter().find(|(k, _)| k == "B_prime") {
        Some((_, v)) => parse(line_no, "B_prime", v)?,
        None => b,
    };
    let mut counts = Vec::with_capacity((b + 1) * (b_prime + 1));
    for r in 0..=b {
        let (line_no, line) =
            it.next().ok_or_else(|| Error::format(0, format!("expected {} histogram rows, found {r}", b + 1)))?;
        counts.extend(parse_row::<u64>(line_no, line, b_prime + 1)?);
    }
    if let Some((line_no, _)) = it.next() {
        return Err(Error::format(line_no, "unexpected trailing content"));
    }
    Ok(ClickHistogram::new(b + 1, b_prime + 1, counts, pulses)?)
}

// ---- reconstruction report ---------------------------------------------

pub fn write_reconstruction_report(res: &ReconstructionResult, tol: f64, max_iter: usize) -> String {
    format!(
        "n_max={}\niterations={}\nconverged={}\nlog_likelihood={}\ntol={}\nmax_iter={}\n",
        res.rho.n_max(),
        res.iterations,
        res.converged,
        fmt_f64(res.final_log_likelihood()),
        fmt_f64(tol),
        max_iter
    )
}

// ---- characterization --------------------------------------------------

pub fn write_characterization(c: &SourceCharacterization) -> String {
    c.fields().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

// ---- contamination map -------------------------------------------------

pub fn write_contamination_map(map: &ContaminationMap) -> String {
    let mut out = format!(
        "# which={} M={} rows=eta cols=rate sentinel={MAP_SENTINEL}\n# eta={}\n# rate={}\n",
        map.order.photons(),
        fmt_f64(map.modes),
        join_f64(&map.etas),
        join_f64(&map.rates)
    );
    for i in 0..map.etas.len() {
        let row: Vec<String> = (0..map.rates.len())
            .map(|j| map.get(i, j).map(fmt_f64).unwrap_or_else(|| MAP_SENTINEL.to_string()))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// `(which, M, etas, rates, cells)` with `None` for sentinel cells.
pub type ParsedMap = (usize, f64, Vec<f64>, Vec<f64>, Vec<Option<f64>>);

pub fn read_contamination_map(text: &str) -> Result<ParsedMap> {
    let mut it = lines(text);
    let mut next_header = |what: &str| -> Result<(usize, Vec<(String, String)>)> {
        let (line_no, line) = it.next().ok_or_else(|| Error::format(0, format!("missing {what} header")))?;
        Ok((line_no, header_fields(line_no, line)?))
    };
    let (l1, h) = next_header("grid")?;
    let which: usize = parse(l1, "which", lookup(&h, "which", l1)?)?;
    let modes: f64 = parse(l1, "M", lookup(&h, "M", l1)?)?;
    let (l2, h) = next_header("eta")?;
    let eta_raw = lookup(&h, "eta", l2)?;
    let etas: Vec<f64> = eta_raw.split(',').map(|v| parse(l2, "eta", v)).collect::<Result<_>>()?;
    let (l3, h) = next_header("rate")?;
    let rate_raw = lookup(&h, "rate", l3)?;
    let rates: Vec<f64> = rate_raw.split(',').map(|v| parse(l3, "rate", v)).collect::<Result<_>>()?;
    let mut cells = Vec::with_capacity(etas.len() * rates.len());
    for i in 0..etas.len() {
        let (line_no, line) =
            it.next().ok_or_else(|| Error::format(0, format!("expected {} map rows, found {i}", etas.len())))?;
        let row: Vec<&str> = line.split(',').collect();
        if row.len() != rates.len() {
            return Err(Error::format(line_no, format!("expected {} entries, found {}", rates.len(), row.len())));
        }
        for v in row {
            let v = v.trim();
            cells.push(if v == MAP_SENTINEL { None } else { Some(parse(line_no, "map entry", v)?) });
        }
    }
    if let Some((line_no, _)) = it.next() {
        return Err(Error::format(line_no, "unexpected trailing content"));
    }
    Ok((which, modes, etas, rates, cells))
}

// ---- experiment configuration ------------------------------------------

const CONFIG_KEYS: &[&str] = &[
    "N",
    "eta",
    "eta_prime",
    "M",
    "pulses",
    "seed",
    "paths",
    "weights_a",
    "weights_b",
    "calibration_pulses",
    "calibration_N",
    "n_max",
    "tol",
    "max_iter",
    "bootstrap",
    "block_size",
];

fn parse_weights(kv: &KeyValues, key: &str, paths: usize) -> Result<PathWeights> {
    match kv.raw(key) {
        Some((line, raw)) => {
            let w: Vec<f64> = raw.split(',').map(|v| parse(line, key, v)).collect::<Result<_>>()?;
            Ok(PathWeights::new(w)?)
        }
        None => Ok(PathWeights::uniform(paths)?),
    }
}

pub fn read_experiment_config(text: &str) -> Result<ExperimentConfig> {
    let kv = KeyValues::parse(text)?;
    kv.only(CONFIG_KEYS)?;
    let source =
        EffectiveSource::new(kv.require("N")?, kv.require("eta")?, kv.require("eta_prime")?, kv.require("M")?)?;
    let mut cfg = ExperimentConfig::new(source, kv.require("seed")?);
    let paths: usize = kv.get("paths")?.unwrap_or(twinbeam_core::loop_detector::DEFAULT_PATHS);
    cfg.weights_a = parse_weights(&kv, "weights_a", paths)?;
    cfg.weights_b = parse_weights(&kv, "weights_b", paths)?;
    cfg.n_max = cfg.weights_a.paths().min(cfg.weights_b.paths());
    if let Some(v) = kv.get("pulses")? {
        cfg.pulses = v;
    }
    if let Some(v) = kv.get("calibration_pulses")? {
        cfg.calibration_pulses = v;
    }
    if let Some(v) = kv.get("calibration_N")? {
        cfg.calibration_mean_pairs = v;
    }
    if let Some(v) = kv.get("n_max")? {
        cfg.n_max = v;
    }
    if let Some(v) = kv.get("tol")? {
        cfg.tol = v;
    }
    if let Some(v) = kv.get("max_iter")? {
        cfg.max_iter = v;
    }
    if let Some(v) = kv.get("bootstrap")? {
        cfg.bootstrap = v;
    }
    if let Some(v) = kv.get("block_size")? {
        cfg.block_size = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Full resolved configuration, readable by [`read_experiment_config`].
pub fn write_experiment_config(cfg: &ExperimentConfig) -> String {
    let s = &cfg.source;
    format!(
        "N={}\neta={}\neta_prime={}\nM={}\npulses={}\nseed={}\nweights_a={}\nweights_b={}\n\
         calibration_pulses={}\ncalibration_N={}\nn_max={}\ntol={}\nmax_iter={}\nbootstrap={}\nblock_size={}\n",
        fmt_f64(s.mean_pairs()),
        fmt_f64(s.eta()),
        fmt_f64(s.eta_prime()),
        fmt_f64(s.modes()),
        cfg.pulses,
        cfg.seed,
        join_f64(cfg.weights_a.as_slice()),
        join_f64(cfg.weights_b.as_slice()),
        cfg.calibration_pulses,
        fmt_f64(cfg.calibration_mean_pairs),
        cfg.n_max,
        fmt_f64(cfg.tol),
        cfg.max_iter,
        cfg.bootstrap,
        cfg.block_size
    )
}
