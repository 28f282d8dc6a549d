//! CSV and JSON artifacts written by every subcommand.
//!
//! Each CSV starts with a `# pdfevo <schema> v<version>` comment line
//! followed by a column header. Bodies contain no timestamps, so identical
//! runs give identical bytes. Run metadata goes to `summary.json`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pdfevo::excitation::Kernel;
use pdfevo::grid::{GridSpec, PdfField};

use crate::config::{GridConfig, RunConfig};

pub const CSV_VERSION: u32 = 1;
pub const SUMMARY_VERSION: u32 = 1;
pub const SUMMARY_FILE: &str = "summary.json";
pub const MOMENTS_FILE: &str = "moments.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const BENCH_FILE: &str = "bench.csv";
pub const BENCH_CONSTANT_FILE: &str = "bench_constant.csv";

#[derive(Debug, thiserror::Error)]
pub enum ArtifactError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ArtifactError + '_ {
    move |source| ArtifactError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> ArtifactError + '_ {
    move |source| ArtifactError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> ArtifactError {
    ArtifactError::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Opens a CSV writer after emitting the versioned schema line.
fn csv_writer(path: &Path, schema: &str) -> Result<csv::Writer<BufWriter<File>>, ArtifactError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "# pdfevo {schema} v{CSV_VERSION}").map_err(io_err(path))?;
    Ok(csv::Writer::from_writer(out))
}

fn finish(mut w: csv::Writer<BufWriter<File>>, path: &Path) -> Result<(), ArtifactError> {
    w.flush().map_err(io_err(path))
}

/// Reads a CSV written by this module, checking its schema line.
fn csv_reader(path: &Path, schema: &str) -> Result<csv::Reader<File>, ArtifactError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let first = text.lines().next().unwrap_or_default();
    let expected = format!("# pdfevo {schema} v{CSV_VERSION}");
    if first != expected {
        return Err(format_err(
            path,
            format!("expected schema line `{expected}`, found `{first}`"),
        ));
    }
    let file = File::open(path).map_err(io_err(path))?;
    Ok(csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file))
}

pub fn pdf_file(t: f64) -> String {
    format!("pdf_t{t}.csv")
}

pub fn marginal_file(t: f64) -> String {
    format!("marginal_t{t}.csv")
}

pub fn write_pdf(path: &Path, field: &PdfField) -> Result<(), ArtifactError> {
    let mut w = csv_writer(path, "pdf")?;
    w.write_record(["x1", "x2", "f"]).map_err(csv_err(path))?;
    for k in 0..field.grid.len() {
        let [x1, x2] = field.grid.point(k);
        w.serialize((x1, x2, field.values[k])).map_err(csv_err(path))?;
    }
    finish(w, path)
}

/// Reads a joint density and checks that its nodes are those of `grid`.
pub fn read_pdf(path: &Path, grid: &GridSpec, t: f64) -> Result<PdfField, ArtifactError> {
    let mut r = csv_reader(path, "pdf")?;
    let mut values = Vec::with_capacity(grid.len());
    for (k, row) in r.deserialize::<(f64, f64, f64)>().enumerate() {
        let (x1, x2, f) = row.map_err(csv_err(path))?;
        if k >= grid.len() {
            return Err(format_err(path, "more rows than grid nodes"));
        }
        let [g1, g2] = grid.point(k);
        let tol = 1e-9 * (1.0 + g1.abs().max(g2.abs()));
        if (x1 - g1).abs() > tol || (x2 - g2).abs() > tol {
            return Err(format_err(
                path,
                format!("row {k} at ({x1}, {x2}) is not grid node ({g1}, {g2})"),
            ));
        }
        values.push(f);
    }
    if values.len() != grid.len() {
        return Err(format_err(
            path,
            format!("{} rows for {} grid nodes", values.len(), grid.len()),
        ));
    }
    PdfField::new(grid.clone(), values, t).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_marginals(path: &Path, field: &PdfField) -> Result<(), ArtifactError> {
    let mut w = csv_writer(path, "marginal")?;
    w.write_record(["axis", "x", "f"]).map_err(csv_err(path))?;
    for axis in 0..2 {
        let m = field.marginal(axis);
        for (x, f) in m.x.iter().zip(&m.f) {
            w.serialize((axis + 1, x, f)).map_err(csv_err(path))?;
        }
    }
    finish(w, path)
}

/// One moment value; `stderr` is present for Monte Carlo estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub t: f64,
    pub name: String,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stderr: Option<f64>,
}

pub fn write_moments(path: &Path, rows: &[MomentRow]) -> Result<(), ArtifactError> {
    let with_stderr = rows.iter().any(|r| r.stderr.is_some());
    let mut w = csv_writer(path, "moments")?;
    if with_stderr {
        w.write_record(["t", "name", "value", "stderr"])
            .map_err(csv_err(path))?;
        for r in rows {
            w.serialize((r.t, &r.name, r.value, r.stderr.unwrap_or(f64::NAN)))
                .map_err(csv_err(path))?;
        }
    } else {
        w.write_record(["t", "name", "value"]).map_err(csv_err(path))?;
        for r in rows {
            w.serialize((r.t, &r.name, r.value)).map_err(csv_err(path))?;
        }
    }
    finish(w, path)
}

pub fn read_moments(path: &Path) -> Result<Vec<MomentRow>, ArtifactError> {
    let mut r = csv_reader(path, "moments")?;
    let headers = r.headers().map_err(csv_err(path))?.clone();
    let with_stderr = headers.len() == 4;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err(path))?;
        let num = |i: usize| -> Result<f64, ArtifactError> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| format_err(path, format!("bad number in column {i} of {rec:?}")))
        };
        rows.push(MomentRow {
            t: num(0)?,
            name: rec.get(1).unwrap_or_default().to_string(),
            value: num(2)?,
            stderr: if with_stderr { Some(num(3)?) } else { None },
        });
    }
    Ok(rows)
}

/// Per-step solver diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticRow {
    pub t: f64,
    pub mass: f64,
    pub min_f: f64,
    pub clipped: f64,
    pub closure_iterations: usize,
    pub linear_iterations: usize,
}

pub fn write_diagnostics(path: &Path, rows: &[DiagnosticRow]) -> Result<(), ArtifactError> {
    let mut w = csv_writer(path, "diagnostics")?;
    w.write_record([
        "t",
        "mass",
        "min_f",
        "clipped",
        "closure_iterations",
        "linear_iterations",
    ])
    .map_err(csv_err(path))?;
    for r in rows {
        w.serialize((
            r.t,
            r.mass,
            r.min_f,
            r.clipped,
            r.closure_iterations,
            r.linear_iterations,
        ))
        .map_err(csv_err(path))?;
    }
    finish(w, path)
}

/// Column 2 of a transition matrix and its error against the reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub t: f64,
    pub method: String,
    pub order: usize,
    pub phi12: f64,
    pub phi22: f64,
    pub frob_err: f64,
}

pub fn write_bench(path: &Path, rows: &[BenchRow]) -> Result<(), ArtifactError> {
    let mut w = csv_writer(path, "bench")?;
    w.write_record(["t", "method", "order", "phi12", "phi22", "frob_err"])
        .map_err(csv_err(path))?;
    for r in rows {
        w.serialize((r.t, &r.method, r.order, r.phi12, r.phi22, r.frob_err))
            .map_err(csv_err(path))?;
    }
    finish(w, path)
}

pub fn read_bench(path: &Path) -> Result<Vec<BenchRow>, ArtifactError> {
    let mut r = csv_reader(path, "bench")?;
    r.deserialize().collect::<Result<_, _>>().map_err(csv_err(path))
}

/// Files and moments of one output time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSummary {
    pub t: f64,
    pub pdf: String,
    pub marginal: String,
    pub mass: f64,
    pub mean: [f64; 2],
    /// Row-major covariance.
    pub cov: [f64; 4],
    pub boundary_ratio: f64,
    /// Peak `(location, value)` of each marginal.
    pub marginal_peaks: [(f64, f64); 2],
}

impl SnapshotSummary {
    /// Summary of `field`, filed under the requested output time `t`.
    pub fn new(t: f64, field: &PdfField) -> Self {
        let c = field.covariance();
        Self {
            t,
            pdf: pdf_file(t),
            marginal: marginal_file(t),
            mass: field.mass(),
            mean: field.mean(),
            cov: [c[(0, 0)], c[(0, 1)], c[(1, 0)], c[(1, 1)]],
            boundary_ratio: field.boundary_ratio(),
            marginal_peaks: [field.marginal(0).peak(), field.marginal(1).peak()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub dt: f64,
    pub steps: usize,
    pub diffusion_projected: bool,
    pub max_mass_drift: f64,
    pub max_clipped_per_step: f64,
    pub total_clipped: f64,
    pub max_closure_iterations: usize,
    pub total_linear_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McStats {
    pub n_paths: usize,
    pub n_kept: usize,
    pub diverged: usize,
    /// Samples outside the grid at each output time.
    pub outside: Vec<usize>,
    pub bandwidth: Vec<Option<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchStats {
    pub moments_dir: PathBuf,
    pub t_end: f64,
    /// Max-over-t column error of each `method(order)` against RK4.
    pub max_error: Vec<(String, usize, f64)>,
    /// The same against `exp(t R(0))` for the frozen generator.
    pub constant_max_error: Vec<(String, usize, f64)>,
    /// `‖t R(0)‖` at the end of the constant sub-bench.
    pub constant_generator_norm: f64,
}

impl BenchStats {
    pub fn error_of(&self, method: &str, order: usize) -> Option<f64> {
        self.max_error
            .iter()
            .find(|(m, o, _)| m == method && *o == order)
            .map(|e| e.2)
    }
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub version: u32,
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    pub created_unix: u64,
    pub wall_time_s: f64,
    pub config: RunConfig,
    pub grid: GridConfig,
    /// Kernel after resolving the configured correlation time.
    pub kernel: Kernel,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_cor: Option<f64>,
    pub snapshots: Vec<SnapshotSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mc: Option<McStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchStats>,
}

impl RunSummary {
    pub fn grid_spec(&self) -> Result<GridSpec, String> {
        GridSpec::new(self.grid.lo, self.grid.hi, self.grid.nodes).map_err(|e| e.to_string())
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ArtifactError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut out, value).map_err(|source| ArtifactError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    writeln!(out).map_err(io_err(path))?;
    out.flush().map_err(io_err(path))
}

pub fn read_summary(dir: &Path) -> Result<RunSummary, ArtifactError> {
    let path = dir.join(SUMMARY_FILE);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|source| ArtifactError::Json { path, source })
}
