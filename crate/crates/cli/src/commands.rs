//! The `solve`, `mc`, `compare` and `propagator-bench` subcommands.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use log::{info, warn};
use nalgebra::DMatrix;
use serde::Serialize;

use pdfevo::coefficients::Equation;
use pdfevo::compare::{compare_fields, FieldComparison};
use pdfevo::grid::PdfField;
use pdfevo::montecarlo::{density_estimate, simulate};
use pdfevo::propagator::{magnus, matrix_exp, peano_baker, rk4_transition, MatrixTrajectory};
use pdfevo::solver::evolve;

use crate::artifacts::{
    self, read_moments, read_pdf, read_summary, write_bench, write_diagnostics, write_json, write_marginals,
    write_moments, write_pdf, ArtifactError, BenchRow, BenchStats, DiagnosticRow, McStats, MomentRow, RunSummary,
    SnapshotSummary, SolverStats,
};
use crate::config::{ConfigError, RunConfig};

pub const COMPARE_FILE: &str = "compare.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Solver(pdfevo::Error),
}

impl From<pdfevo::Error> for CliError {
    fn from(e: pdfevo::Error) -> Self {
        CliError::Solver(e)
    }
}

impl CliError {
    /// 2 for solver non-convergence, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Solver(pdfevo::Error::NonConvergence { .. } | pdfevo::Error::Stagnation { .. }) => 2,
            _ => 1,
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|source| {
        CliError::Artifact(ArtifactError::Io {
            path: dir.to_path_buf(),
            source,
        })
    })
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_snapshots(dir: &Path, times: &[f64], fields: &[&PdfField]) -> Result<Vec<SnapshotSummary>, CliError> {
    times
        .iter()
        .zip(fields)
        .map(|(&t, f)| {
            let s = SnapshotSummary::new(t, f);
            write_pdf(&dir.join(&s.pdf), f)?;
            write_marginals(&dir.join(&s.marginal), f)?;
            Ok(s)
        })
        .collect()
}

/// Evolves the configured initial density with `equation` and writes the artifacts to `out`.
pub fn run_solve(config: &RunConfig, equation: Equation, out: &Path) -> Result<RunSummary, CliError> {
    let exp = config.resolve()?;
    let start = Instant::now();
    let f0 = PdfField::gaussian(&exp.grid, exp.initial.mean.as_slice(), &exp.initial.cov, exp.spec.t0)?;
    let times = &config.output.times;
    let result = evolve(exp.model.as_ref(), &exp.spec, &f0, &config.solver, equation, times)?;
    let wall = start.elapsed().as_secs_f64();
    create_dir(out)?;

    let fields: Vec<&PdfField> = times
        .iter()
        .map(|&t| {
            result
                .snapshot_at(t)
                .ok_or_else(|| CliError::Input(format!("no snapshot at output time {t}")))
        })
        .collect::<Result<_, _>>()?;
    let snapshots = write_snapshots(out, times, &fields)?;

    let basis = exp.model.moment_basis().unwrap_or_default();
    let mut rows = Vec::new();
    let hist = &result.history;
    for ((t, r), m) in hist.times().iter().zip(hist.r_matrices()).zip(hist.moments()) {
        for (b, v) in basis.iter().zip(m) {
            rows.push(MomentRow {
                t: *t,
                name: b.to_string(),
                value: *v,
                stderr: None,
            });
        }
        for i in 0..r.nrows() {
            for j in 0..r.ncols() {
                rows.push(MomentRow {
                    t: *t,
                    name: format!("R{}{}", i + 1, j + 1),
                    value: r[(i, j)],
                    stderr: None,
                });
            }
        }
    }
    write_moments(&out.join(artifacts::MOMENTS_FILE), &rows)?;
    let diagnostics: Vec<DiagnosticRow> = result
        .steps
        .iter()
        .map(|s| DiagnosticRow {
            t: s.t,
            mass: s.mass,
            min_f: s.min,
            clipped: s.clipped,
            closure_iterations: s.closure_iterations,
            linear_iterations: s.linear_iterations,
        })
        .collect();
    write_diagnostics(&out.join(artifacts::DIAGNOSTICS_FILE), &diagnostics)?;

    let stats = SolverStats {
        dt: result.dt,
        steps: result.steps.len(),
        diffusion_projected: config.solver.diffusion.projects(exp.model.as_ref()),
        max_mass_drift: result.max_mass_drift(),
        max_clipped_per_step: result.steps.iter().map(|s| s.clipped).fold(0.0, f64::max),
        total_clipped: result.steps.iter().map(|s| s.clipped).sum(),
        max_closure_iterations: result.max_closure_iterations(),
        total_linear_iterations: result.steps.iter().map(|s| s.linear_iterations).sum(),
    };
    for s in &snapshots {
        if s.boundary_ratio > 1e-10 {
            warn!(
                "t = {}: boundary density is {:.1e} of the peak; the domain may be too small",
                s.t, s.boundary_ratio
            );
        }
    }
    info!(
        "{equation}: {} steps in {wall:.1} s, mass drift {:.1e}, max closure iterations {}",
        stats.steps, stats.max_mass_drift, stats.max_closure_iterations
    );
    let summary = RunSummary {
        version: artifacts::SUMMARY_VERSION,
        command: "solve".into(),
        method: Some(equation.to_string()),
        created_unix: unix_now(),
        wall_time_s: wall,
        config: config.clone(),
        grid: config.grid.clone(),
        kernel: exp.spec.kernel.clone(),
        tau_cor: exp.tau_cor,
        snapshots,
        solver: Some(stats),
        mc: None,
        bench: None,
    };
    write_json(&out.join(artifacts::SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Runs the Monte Carlo oracle and writes density estimates and moment traces to `out`.
pub fn run_mc(config: &RunConfig, out: &Path) -> Result<RunSummary, CliError> {
    let exp = config.resolve()?;
    let mc = config.mc_config();
    let solver_dt = config.solver.time_step(&exp.spec)?;
    mc.check_against_solver(solver_dt).map_err(|e| ConfigError::Invalid {
        key: "mc.dt".into(),
        message: e.to_string(),
    })?;
    let start = Instant::now();
    let result = simulate(exp.model.as_ref(), &exp.spec, &exp.initial, &mc)?;
    let estimates = config
        .output
        .times
        .iter()
        .map(|&t| {
            let samples = result
                .samples_at(t)
                .ok_or_else(|| CliError::Input(format!("no samples at output time {t}")))?;
            Ok(density_estimate(samples, &exp.grid, t, config.mc.estimator)?)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let wall = start.elapsed().as_secs_f64();
    create_dir(out)?;
    let fields: Vec<&PdfField> = estimates.iter().map(|e| &e.field).collect();
    let snapshots = write_snapshots(out, &config.output.times, &fields)?;

    let trace = &result.trace;
    let mut rows = Vec::with_capacity(trace.times.len() * trace.functionals.len());
    for (k, &t) in trace.times.iter().enumerate() {
        for (q, f) in trace.functionals.iter().enumerate() {
            rows.push(MomentRow {
                t,
                name: f.to_string(),
                value: trace.mean[k][q],
                stderr: Some(trace.stderr[k][q]),
            });
        }
    }
    write_moments(&out.join(artifacts::MOMENTS_FILE), &rows)?;
    if result.diverged > 0 {
        warn!("{} of {} paths diverged and were excluded", result.diverged, mc.n_paths);
    }
    info!("{} paths in {wall:.1} s", result.n_kept);
    let summary = RunSummary {
        version: artifacts::SUMMARY_VERSION,
        command: "mc".into(),
        method: None,
        created_unix: unix_now(),
        wall_time_s: wall,
        config: config.clone(),
        grid: config.grid.clone(),
        kernel: exp.spec.kernel.clone(),
        tau_cor: exp.tau_cor,
        snapshots,
        solver: None,
        mc: Some(McStats {
            n_paths: mc.n_paths,
            n_kept: result.n_kept,
            diverged: result.diverged,
            outside: estimates.iter().map(|e| e.outside).collect(),
            bandwidth: estimates.iter().map(|e| e.bandwidth).collect(),
        }),
        bench: None,
    };
    write_json(&out.join(artifacts::SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Metrics of run `a` against run `b` at every shared output time.
#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    pub a: PathBuf,
    pub b: PathBuf,
    pub a_command: String,
    pub b_command: String,
    pub times: Vec<FieldComparison>,
}

/// Loads the densities written by a `solve` or `mc` run, keyed by output time.
pub fn load_run(dir: &Path) -> Result<(RunSummary, Vec<PdfField>), CliError> {
    let summary = read_summary(dir)?;
    let grid = summary
        .grid_spec()
        .map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
    let fields = summary
        .snapshots
        .iter()
        .map(|s| read_pdf(&dir.join(&s.pdf), &grid, s.t))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((summary, fields))
}

/// Compares two artifact directories; with `out`, also writes `compare.json` there.
pub fn run_compare(a: &Path, b: &Path, out: Option<&Path>) -> Result<CompareReport, CliError> {
    let (sa, fa) = load_run(a)?;
    let (sb, fb) = load_run(b)?;
    if sa.grid != sb.grid {
        return Err(CliError::Input(format!(
            "grid mismatch: {} has {:?}, {} has {:?}",
            a.display(),
            sa.grid,
            b.display(),
            sb.grid
        )));
    }
    let ta: Vec<f64> = sa.snapshots.iter().map(|s| s.t).collect();
    let tb: Vec<f64> = sb.snapshots.iter().map(|s| s.t).collect();
    if ta != tb {
        return Err(CliError::Input(format!("output times differ: {ta:?} vs {tb:?}")));
    }
    let times = fa
        .iter()
        .zip(&fb)
        .map(|(x, y)| compare_fields(x, y))
        .collect::<Result<Vec<_>, _>>()?;
    let report = CompareReport {
        a: a.to_path_buf(),
        b: b.to_path_buf(),
        a_command: sa.method.unwrap_or(sa.command),
        b_command: sb.method.unwrap_or(sb.command),
        times,
    };
    if let Some(out) = out {
        create_dir(out)?;
        write_json(&out.join(COMPARE_FILE), &report)?;
    }
    Ok(report)
}

fn column_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    ((a[(0, 1)] - b[(0, 1)]).powi(2) + (a[(1, 1)] - b[(1, 1)]).powi(2)).sqrt()
}

/// Builds `R(t)` from the moments of a prior run and compares truncated
/// Peano-Baker and Magnus approximations of `Φ[R](t; 0)` with RK4.
pub fn run_propagator_bench(
    config: &RunConfig,
    moments_dir: Option<&Path>,
    out: &Path,
) -> Result<RunSummary, CliError> {
    let exp = config.resolve()?;
    let bench = &config.bench;
    let dir = moments_dir
        .map(Path::to_path_buf)
        .or_else(|| bench.moments_dir.clone())
        .ok_or_else(|| ConfigError::Invalid {
            key: "bench.moments_dir".into(),
            message: "a prior run providing the moment history is required".into(),
        })?;
    if !(bench.t_end > 0.0 && bench.step > 0.0 && bench.step <= bench.t_end) {
        return Err(ConfigError::Invalid {
            key: "bench".into(),
            message: "need 0 < step ≤ t_end".into(),
        }
        .into());
    }
    let basis = exp
        .model
        .moment_basis()
        .ok_or_else(|| CliError::Input("the model has no moment representation of R(t)".into()))?;
    let names: Vec<String> = basis.iter().map(|m| m.to_string()).collect();
    let rows = read_moments(&dir.join(artifacts::MOMENTS_FILE))?;
    let start = Instant::now();

    // moment values by time, in basis order
    let mut times: Vec<f64> = Vec::new();
    let mut values: Vec<Vec<Option<f64>>> = Vec::new();
    for r in &rows {
        let Some(q) = names.iter().position(|n| *n == r.name) else {
            continue;
        };
        if times.last().is_none_or(|&t| r.t > t) {
            times.push(r.t);
            values.push(vec![None; names.len()]);
        }
        let k = times.len() - 1;
        if (times[k] - r.t).abs() > 1e-12 {
            return Err(CliError::Input(format!("moment rows at t = {} are out of order", r.t)));
        }
        values[k][q] = Some(r.value);
    }
    let covered = times.first().is_some_and(|&t| t <= 1e-12) && times.last().is_some_and(|&t| t >= bench.t_end - 1e-9);
    if !covered {
        return Err(CliError::Input(format!(
            "{}: moments {names:?} do not cover [0, {}]",
            dir.display(),
            bench.t_end
        )));
    }
    let mut mats = Vec::with_capacity(times.len());
    let mut kept = Vec::with_capacity(times.len());
    for (t, v) in times.iter().zip(&values) {
        if *t > bench.t_end + 1e-9 {
            break;
        }
        let v: Option<Vec<f64>> = v.iter().copied().collect();
        let v = v.ok_or_else(|| CliError::Input(format!("incomplete moments at t = {t}")))?;
        mats.push(exp.model.mean_jacobian(&v, *t)?);
        kept.push(*t);
    }
    let r0 = mats[0].clone();
    let traj = MatrixTrajectory::new(kept, mats)?;
    let t_end = traj.end();
    let n_out = (t_end / bench.step + 1e-9).floor() as usize;
    let out_times: Vec<f64> = (1..=n_out).map(|k| k as f64 * bench.step).collect();
    let constant = MatrixTrajectory::constant(r0.clone(), 0.0, t_end);

    let methods: Vec<(&str, usize)> = (1..=4)
        .map(|n| ("peano", n))
        .chain((1..=3).map(|n| ("magnus", n)))
        .collect();
    let evaluate = |traj: &MatrixTrajectory, method: &str, n: usize, t: f64| -> Result<DMatrix<f64>, CliError> {
        Ok(match method {
            "peano" => peano_baker(traj, t, 0.0, n)?.value,
            _ => magnus(traj, t, 0.0, n)?.value,
        })
    };
    let mut bench_rows = Vec::new();
    let mut constant_rows = Vec::new();
    for &t in &out_times {
        let steps = ((bench.rk4_steps_per_unit as f64) * t).ceil() as usize;
        let reference = rk4_transition(&traj, t, 0.0, steps)?.value;
        let exact = matrix_exp(&(&r0 * t));
        let frozen_rk4 = rk4_transition(&constant, t, 0.0, steps)?.value;
        bench_rows.push(BenchRow {
            t,
            method: "rk4".into(),
            order: 4,
            phi12: reference[(0, 1)],
            phi22: reference[(1, 1)],
            frob_err: 0.0,
        });
        constant_rows.push(BenchRow {
            t,
            method: "rk4".into(),
            order: 4,
            phi12: frozen_rk4[(0, 1)],
            phi22: frozen_rk4[(1, 1)],
            frob_err: column_error(&frozen_rk4, &exact),
        });
        for &(method, n) in &methods {
            let phi = evaluate(&traj, method, n, t)?;
            bench_rows.push(BenchRow {
                t,
                method: method.into(),
                order: n,
                phi12: phi[(0, 1)],
                phi22: phi[(1, 1)],
                frob_err: column_error(&phi, &reference),
            });
            let frozen = evaluate(&constant, method, n, t)?;
            constant_rows.push(BenchRow {
                t,
                method: method.into(),
                order: n,
                phi12: frozen[(0, 1)],
                phi22: frozen[(1, 1)],
                frob_err: column_error(&frozen, &exact),
            });
        }
    }
    let max_error = |rows: &[BenchRow]| -> Vec<(String, usize, f64)> {
        std::iter::once(("rk4", 4))
            .chain(methods.iter().copied())
            .map(|(m, n)| {
                let e = rows
                    .iter()
                    .filter(|r| r.method == m && r.order == n)
                    .map(|r| r.frob_err)
                    .fold(0.0, f64::max);
                (m.to_string(), n, e)
            })
            .collect()
    };
    let wall = start.elapsed().as_secs_f64();
    create_dir(out)?;
    write_bench(&out.join(artifacts::BENCH_FILE), &bench_rows)?;
    write_bench(&out.join(artifacts::BENCH_CONSTANT_FILE), &constant_rows)?;
    let mut max_err = max_error(&bench_rows);
    max_err.retain(|(m, _, _)| m != "rk4");
    let stats = BenchStats {
        moments_dir: dir,
        t_end,
        max_error: max_err,
        constant_max_error: max_error(&constant_rows),
        constant_generator_norm: (&r0 * t_end).norm(),
    };
    let summary = RunSummary {
        version: artifacts::SUMMARY_VERSION,
        command: "propagator-bench".into(),
        method: None,
        created_unix: unix_now(),
        wall_time_s: wall,
        config: config.clone(),
        grid: config.grid.clone(),
        kernel: exp.spec.kernel.clone(),
        tau_cor: exp.tau_cor,
        snapshots: Vec::new(),
        solver: None,
        mc: None,
        bench: Some(stats),
    };
    write_json(&out.join(artifacts::SUMMARY_FILE), &summary)?;
    Ok(summary)
}
