//! End-to-end acceptance run: every criterion prints one PASS/FAIL line and
//! the test fails if any of them does. The runs go through the same library
//! entry points as the binary, on the shipped configurations.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, Matrix2, Vector2};

use pdfevo::coefficients::{ngfpk_kernel, sct_kernel, DiffusionAssembler, Equation, MomentHistory};
use pdfevo::dynamics::{mean_jacobian, Duffing};
use pdfevo::excitation::{PathSampler, SamplingMethod};
use pdfevo::grid::PdfField;
use pdfevo::montecarlo::{simulate, McConfig};
use pdfevo::propagator::{magnus, peano_baker, rk4_transition, MatrixTrajectory};
use pdfevo_cli::artifacts::{read_moments, RunSummary, MOMENTS_FILE};
use pdfevo_cli::commands::load_run;
use pdfevo_cli::{run_compare, run_mc, run_propagator_bench, run_solve, RunConfig};

fn config(name: &str) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

struct Report {
    failures: Vec<String>,
}

impl Report {
    fn line(&mut self, id: usize, name: &str, pass: bool, detail: String) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        let text = format!("criterion {id} [{verdict}] {name}: {detail}\n");
        // written past the test harness capture so the lines always show
        let mut out = std::io::stdout();
        out.write_all(text.as_bytes()).unwrap();
        out.flush().unwrap();
        if !pass {
            self.failures.push(text.trim_end().to_string());
        }
    }
}

fn trapezoid(x: &[f64], f: &[f64]) -> f64 {
    x.windows(2)
        .zip(f.windows(2))
        .map(|(x, f)| 0.5 * (x[1] - x[0]) * (f[0] + f[1]))
        .sum()
}

fn normal_pdf(x: f64, m: f64, var: f64) -> f64 {
    (-(x - m).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// Marginal L1 of `field` along `axis` against the density `g` on the same nodes.
fn marginal_l1<G: Fn(f64) -> f64>(field: &PdfField, axis: usize, g: G) -> f64 {
    let m = field.marginal(axis);
    let diff: Vec<f64> = m.x.iter().zip(&m.f).map(|(&x, &f)| (f - g(x)).abs()).collect();
    trapezoid(&m.x, &diff)
}

fn snapshot_at(summary: &RunSummary, t: f64) -> usize {
    summary
        .snapshots
        .iter()
        .position(|s| (s.t - t).abs() < 1e-9)
        .unwrap_or_else(|| panic!("no snapshot at t = {t}"))
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den
}

/// Mean and covariance of the damped linear oscillator `ẍ + 2aẋ + ω₀²x = m + ξ`
/// driven by a stationary kernel, by trapezoid quadrature of the impulse response.
struct LinearOracle {
    a: f64,
    omega0: f64,
    gamma: f64,
}

impl LinearOracle {
    fn new(zeta: f64, omega0: f64) -> Self {
        let a = zeta * omega0;
        Self {
            a,
            omega0,
            gamma: (omega0 * omega0 - a * a).sqrt(),
        }
    }

    fn transition(&self, u: f64) -> Matrix2<f64> {
        let (s, c, e) = ((self.gamma * u).sin(), (self.gamma * u).cos(), (-self.a * u).exp());
        let r = self.a / self.gamma;
        e * Matrix2::new(
            c + r * s,
            s / self.gamma,
            -self.omega0 * self.omega0 * s / self.gamma,
            c - r * s,
        )
    }

    fn moments<K: Fn(f64) -> f64>(
        &self,
        t: f64,
        m0: Vector2<f64>,
        c0: Matrix2<f64>,
        mean_force: f64,
        kernel: K,
    ) -> (Vector2<f64>, Matrix2<f64>) {
        let n = (t / 0.005).round() as usize;
        let h = t / n as f64;
        let w = |i: usize| if i == 0 || i == n { 0.5 * h } else { h };
        let g: Vec<Vector2<f64>> = (0..=n)
            .map(|i| self.transition(i as f64 * h).column(1).into())
            .collect();
        let k: Vec<f64> = (0..=n).map(|i| kernel(i as f64 * h)).collect();
        let phi = self.transition(t);
        let mut mean = phi * m0;
        for (i, gi) in g.iter().enumerate() {
            mean += gi * (mean_force * w(i));
        }
        let mut q = Matrix2::zeros();
        for i in 0..=n {
            let mut row = Vector2::zeros();
            for j in 0..=n {
                row += g[j] * (k[i.abs_diff(j)] * w(j));
            }
            q += g[i] * row.transpose() * w(i);
        }
        (mean, phi * c0 * phi.transpose() + q)
    }
}

fn criterion_1(report: &mut Report, root: &Path, solver_runs: &mut Vec<RunSummary>) {
    let cfg = config("linear.toml");
    let out = root.join("linear_exact");
    let start = Instant::now();
    let summary = run_solve(&cfg, Equation::LinearExact, &out).expect("linear-exact solve");
    let wall = start.elapsed().as_secs_f64();
    let (_, fields) = load_run(&out).expect("reload linear run");

    let variance = cfg.excitation.variance.unwrap();
    let peak = cfg.excitation.peak_freq.unwrap();
    let shape = match summary.kernel {
        pdfevo::excitation::Kernel::GaussianFilter { shape, .. } => shape,
        ref k => panic!("unexpected kernel {k:?}"),
    };
    let tau = summary.tau_cor.unwrap_or(f64::NAN);
    let (zeta, omega0) = match cfg.system {
        pdfevo_cli::config::SystemConfig::LinearOscillator { zeta, omega0 } => (zeta, omega0),
        _ => panic!("linear configuration expected"),
    };
    let oracle = LinearOracle::new(zeta, omega0);
    let m0 = Vector2::from_column_slice(&cfg.initial.mean);
    let c0 = Matrix2::from_fn(|i, j| cfg.initial.cov[i][j]);
    let mean_force = match cfg.excitation.mean {
        pdfevo::excitation::TimeFunction::Constant { value } => value,
        ref other => panic!("constant excitation mean expected, got {other:?}"),
    };
    let kernel = |u: f64| variance * (-(shape * u).powi(2)).exp() * (peak * u).cos();

    let (mut worst_l1, mut worst_mean, mut worst_cov) = (0.0f64, 0.0f64, 0.0f64);
    let mut last_mean = 0.0;
    for field in &fields {
        let (m, c) = oracle.moments(field.t, m0, c0, mean_force, kernel);
        let l1 = (0..2)
            .map(|axis| marginal_l1(field, axis, |x| normal_pdf(x, m[axis], c[(axis, axis)])))
            .fold(0.0, f64::max);
        let fm = field.mean();
        let fc = field.covariance();
        worst_l1 = worst_l1.max(l1);
        worst_mean = worst_mean.max(rel_err(&fm, m.as_slice()));
        worst_cov = worst_cov.max(rel_err(fc.as_slice(), c.as_slice()));
        last_mean = fm[0];
    }
    let target = mean_force / (omega0 * omega0);
    let long_time = (last_mean - target).abs() / target;
    let pass = worst_l1 <= 0.02 && worst_mean <= 0.01 && worst_cov <= 0.01 && long_time <= 0.01 && wall <= 300.0;
    report.line(
        1,
        "linear oscillator against the Gaussian oracle",
        pass,
        format!(
            "tau_cor {tau:.3}, max marginal L1 {worst_l1:.2e}, max mean err {worst_mean:.2e}, \
             max cov err {worst_cov:.2e}, long-time mean {last_mean:.4} (err {long_time:.2e}), {wall:.0} s"
        ),
    );
    solver_runs.push(summary);
}

fn criterion_2(report: &mut Report, root: &Path, solver_runs: &mut Vec<RunSummary>) {
    let cfg = config("white_noise.toml");
    let out = root.join("white_noise");
    let start = Instant::now();
    let summary = run_solve(&cfg, Equation::Fpk, &out).expect("fpk solve");
    let wall = start.elapsed().as_secs_f64();
    let (_, fields) = load_run(&out).expect("reload fpk run");
    let field = fields.last().unwrap();

    let zeta = match cfg.system {
        pdfevo_cli::config::SystemConfig::Duffing { zeta } => zeta,
        _ => panic!("Duffing configuration expected"),
    };
    let d = match cfg.excitation.intensity {
        Some(pdfevo::excitation::TimeFunction::Constant { value }) => value,
        ref other => panic!("constant intensity expected, got {other:?}"),
    };
    let beta = 2.0 * zeta / d;
    let energy = |x1: f64, x2: f64| 0.5 * x2 * x2 + 0.25 * x1.powi(4) - 0.5 * x1 * x1;
    let weight = |x1: f64, x2: f64| (-beta * energy(x1, x2)).exp();

    // the candidate solves the stationary equation, checked by finite differences
    let h = 1e-3;
    let d1 = |x1: f64, x2: f64, f: &dyn Fn(f64, f64) -> f64| {
        (-f(x1 + 2.0 * h, x2) + 8.0 * f(x1 + h, x2) - 8.0 * f(x1 - h, x2) + f(x1 - 2.0 * h, x2)) / (12.0 * h)
    };
    let d2 = |x1: f64, x2: f64, f: &dyn Fn(f64, f64) -> f64| {
        (-f(x1, x2 + 2.0 * h) + 8.0 * f(x1, x2 + h) - 8.0 * f(x1, x2 - h) + f(x1, x2 - 2.0 * h)) / (12.0 * h)
    };
    let mut residual = 0.0f64;
    for i in 0..=24 {
        for j in 0..=24 {
            let (x1, x2) = (-2.4 + 0.2 * i as f64, -2.4 + 0.2 * j as f64);
            let flux1 = |a: f64, b: f64| b * weight(a, b);
            let flux2 = |a: f64, b: f64| (-a.powi(3) + a - 2.0 * zeta * b) * weight(a, b);
            let grad2 = |a: f64, b: f64| d2(a, b, &weight);
            let r = -d1(x1, x2, &flux1) - d2(x1, x2, &flux2) + d * d2(x1, x2, &grad2);
            residual = residual.max(r.abs());
        }
    }

    let grid = &field.grid;
    let x: [Vec<f64>; 2] = [grid.axis(0), grid.axis(1)];
    let raw: Vec<Vec<f64>> = x[0]
        .iter()
        .map(|&a| x[1].iter().map(|&b| weight(a, b)).collect())
        .collect();
    let rows: Vec<f64> = raw.iter().map(|r| trapezoid(&x[1], r)).collect();
    let z = trapezoid(&x[0], &rows);
    let m1: Vec<f64> = rows.iter().map(|v| v / z).collect();
    let m2: Vec<f64> = (0..x[1].len())
        .map(|j| {
            let col: Vec<f64> = raw.iter().map(|r| r[j]).collect();
            trapezoid(&x[0], &col) / z
        })
        .collect();
    let l1 = [&m1, &m2]
        .iter()
        .enumerate()
        .map(|(axis, oracle)| {
            let m = field.marginal(axis);
            let diff: Vec<f64> = m.f.iter().zip(oracle.iter()).map(|(a, b)| (a - b).abs()).collect();
            trapezoid(&m.x, &diff)
        })
        .fold(0.0, f64::max);
    let pass = residual <= 1e-8 && l1 <= 0.03 && wall <= 600.0;
    report.line(
        2,
        "white-noise Duffing against the stationary density",
        pass,
        format!(
            "t = {}, oracle residual {residual:.1e}, max marginal L1 {l1:.2e}, {wall:.0} s",
            field.t
        ),
    );
    solver_runs.push(summary);
}

struct ColouredRuns {
    mc: PathBuf,
    ngfpk: PathBuf,
    sct: PathBuf,
    wall: f64,
}

fn coloured_runs(cfg: &RunConfig, root: &Path, tag: &str, solver_runs: &mut Vec<RunSummary>) -> ColouredRuns {
    let start = Instant::now();
    let runs = ColouredRuns {
        mc: root.join(format!("{tag}_mc")),
        ngfpk: root.join(format!("{tag}_ngfpk")),
        sct: root.join(format!("{tag}_sct")),
        wall: 0.0,
    };
    run_mc(cfg, &runs.mc).expect("Monte Carlo run");
    solver_runs.push(run_solve(cfg, Equation::Ngfpk, &runs.ngfpk).expect("ngfpk solve"));
    solver_runs.push(run_solve(cfg, Equation::Sct, &runs.sct).expect("sct solve"));
    ColouredRuns {
        wall: start.elapsed().as_secs_f64(),
        ..runs
    }
}

fn criterion_3(report: &mut Report, root: &Path, solver_runs: &mut Vec<RunSummary>) {
    let cfg = config("duffing_tau01.toml");
    let runs = coloured_runs(&cfg, root, "tau01", solver_runs);
    let worst = |dir: &Path| {
        run_compare(dir, &runs.mc, None)
            .expect("compare with Monte Carlo")
            .times
            .iter()
            .map(|c| c.max_marginal_l1())
            .fold(0.0, f64::max)
    };
    let (ng, sct) = (worst(&runs.ngfpk), worst(&runs.sct));
    let pass = ng <= 0.05 && sct <= 0.05 && runs.wall <= 1200.0;
    report.line(
        3,
        "zero-mean Duffing, short correlation, both closures against Monte Carlo",
        pass,
        format!(
            "max marginal L1 ngfpk {ng:.3}, sct {sct:.3} at t = {:?}, {:.0} s",
            cfg.output.times, runs.wall
        ),
    );
}

fn criterion_4(report: &mut Report, root: &Path, solver_runs: &mut Vec<RunSummary>) {
    let cfg = config("duffing_tau03.toml");
    let runs = coloured_runs(&cfg, root, "tau03", solver_runs);
    let ratio = |dir: &Path| {
        let rep = run_compare(dir, &runs.mc, None).expect("compare with Monte Carlo");
        rep.times.last().unwrap().marginals[0].peak_ratio
    };
    let (ng, sct) = (ratio(&runs.ngfpk), ratio(&runs.sct));
    let pass = sct >= 1.15 && (ng - 1.0).abs() <= 0.10;
    report.line(
        4,
        "zero-mean Duffing, long correlation, steady position peak",
        pass,
        format!(
            "peak ratio to Monte Carlo at t = {}: sct {sct:.3}, ngfpk {ng:.3}, {:.0} s",
            cfg.output.times.last().unwrap(),
            runs.wall
        ),
    );
}

fn right_well_mass(field: &PdfField) -> f64 {
    field.integrate(|x1, _| if x1 > 0.0 { 1.0 } else { 0.0 }) / field.mass()
}

fn criterion_5(report: &mut Report, root: &Path, solver_runs: &mut Vec<RunSummary>) -> PathBuf {
    let cfg = config("duffing_ramp.toml");
    let runs = coloured_runs(&cfg, root, "ramp", solver_runs);
    let t_end = *cfg.output.times.last().unwrap();
    let rows = read_moments(&runs.mc.join(MOMENTS_FILE)).expect("Monte Carlo moments");
    let mc_mean = rows
        .iter()
        .find(|r| r.name == "x1" && (r.t - t_end).abs() < 1e-9)
        .expect("Monte Carlo mean at the last output time")
        .value;
    let solver = |dir: &Path| {
        let (summary, fields) = load_run(dir).expect("reload solver run");
        let k = snapshot_at(&summary, t_end);
        (summary.snapshots[k].mean[0], right_well_mass(&fields[k]))
    };
    let (ng_mean, ng_right) = solver(&runs.ngfpk);
    let (sct_mean, sct_right) = solver(&runs.sct);
    let (_, mc_fields) = load_run(&runs.mc).expect("reload Monte Carlo run");
    let mc_right = right_well_mass(mc_fields.last().unwrap());
    let ng_err = (ng_mean - mc_mean).abs() / mc_mean.abs();
    let sct_err = (sct_mean - mc_mean).abs() / mc_mean.abs();
    let pass = (0.2..=0.5).contains(&sct_err) && ng_err <= 0.10 && ng_right > 0.5 && sct_right > 0.5;
    report.line(
        5,
        "ramped-mean Duffing, long-time mean position",
        pass,
        format!(
            "t = {t_end}: mean MC {mc_mean:.4}, ngfpk {ng_mean:.4} (err {ng_err:.3}), sct {sct_mean:.4} \
             (err {sct_err:.3}, band [0.2, 0.5]); P(x1 > 0) MC {mc_right:.3}, ngfpk {ng_right:.3}, \
             sct {sct_right:.3}, {:.0} s",
            runs.wall
        ),
    );
    runs.mc
}

fn criterion_6(report: &mut Report, root: &Path, mc_dir: &Path) {
    let cfg = config("duffing_ramp.toml");
    let start = Instant::now();
    let summary = run_propagator_bench(&cfg, Some(mc_dir), &root.join("bench")).expect("propagator bench");
    let wall = start.elapsed().as_secs_f64();
    let stats = summary.bench.expect("bench statistics");
    let err = |m: &str, n: usize| stats.error_of(m, n).expect("method in bench");
    let (m3, m2, p4) = (err("magnus", 3), err("magnus", 2), err("peano", 4));
    let ordered = m3 < m2 && m2 < p4;
    let worst_constant =
        stats.constant_max_error.iter().fold(
            ("", 0, 0.0f64),
            |acc, (m, n, e)| if *e > acc.2 { (m.as_str(), *n, *e) } else { acc },
        );
    let constant_ok = worst_constant.2 <= 1e-6;
    let constant_list: Vec<String> = stats
        .constant_max_error
        .iter()
        .map(|(m, n, e)| match m.as_str() {
            "rk4" => format!("rk4 {e:.1e}"),
            _ => format!("{m}{n} {e:.1e}"),
        })
        .collect();
    report.line(
        6,
        "transition-matrix series against RK4 on [0, 3]",
        ordered && constant_ok && wall <= 60.0,
        format!(
            "max error magnus3 {m3:.2e} < magnus2 {m2:.2e} < peano4 {p4:.2e}: {ordered}; constant generator \
             (norm {:.2}) worst {}{} {:.1e} [{}], {wall:.1} s",
            stats.constant_generator_norm,
            worst_constant.0,
            worst_constant.1,
            worst_constant.2,
            constant_list.join(", ")
        ),
    );
}

fn commuting(u: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -0.5]) * (1.0 + 0.5 * u)
}

fn non_commuting(u: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0 - 0.5 * u.sin(), -0.3 - 0.1 * u])
}

fn criterion_7(report: &mut Report, solver_runs: &[RunSummary]) {
    let start = Instant::now();
    let mut checks: Vec<(&str, bool, String)> = Vec::new();

    // Φ(s; s) = I for every series and for RK4
    let traj = MatrixTrajectory::sample(non_commuting, 0.0, 3.0, 300);
    let id = DMatrix::<f64>::identity(2, 2);
    let mut worst = 0.0f64;
    for n in 1..=4 {
        worst = worst.max((peano_baker(&traj, 1.3, 1.3, n).unwrap().value - &id).amax());
    }
    for n in 1..=3 {
        worst = worst.max((magnus(&traj, 1.3, 1.3, n).unwrap().value - &id).amax());
    }
    worst = worst.max((rk4_transition(&traj, 1.3, 1.3, 10).unwrap().value - &id).amax());
    checks.push(("identity", worst <= 1e-15, format!("{worst:.1e}")));

    // Φ(3; 0) = Φ(3; 1.2) Φ(1.2; 0)
    let full = rk4_transition(&traj, 3.0, 0.0, 3000).unwrap().value;
    let split =
        rk4_transition(&traj, 3.0, 1.2, 1800).unwrap().value * rk4_transition(&traj, 1.2, 0.0, 1200).unwrap().value;
    let semigroup = (full - split).amax();
    checks.push(("rk4 semigroup", semigroup <= 1e-8, format!("{semigroup:.1e}")));

    // A(u) = (1 + u/2) M commutes with itself: Φ(t; s) = exp(∫A) M
    let traj = MatrixTrajectory::sample(commuting, 0.0, 3.0, 60);
    let (s, t) = (0.5, 2.5);
    let exact = (DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -0.5]) * ((t - s) + 0.25 * (t * t - s * s))).exp();
    let worst = (1..=3)
        .map(|n| (magnus(&traj, t, s, n).unwrap().value - &exact).amax())
        .fold(0.0, f64::max);
    checks.push(("magnus commuting", worst <= 1e-10, format!("{worst:.1e}")));

    // ngFPK kernel tends to the SCT kernel as t − s → 0
    let model = Duffing::new(0.5).unwrap();
    let mut history = MomentHistory::new();
    for k in 0..=10_000 {
        let t = k as f64 * 1e-4;
        let m = 0.3 + 0.4 * (1.0 - (-t).exp());
        history
            .push(t, mean_jacobian(&model, &[m], t).unwrap(), vec![m])
            .unwrap();
    }
    let lags = [1e-4, 3e-4, 1e-3, 3e-3, 1e-2];
    let x = [1.7, -0.4];
    let pts: Vec<(f64, f64)> = lags
        .iter()
        .map(|&u| {
            let a = ngfpk_kernel(&model, &x, 1.0, 1.0 - u, &history).unwrap();
            let b = sct_kernel(&model, &x, 1.0, 1.0 - u);
            (u.ln(), (a - b).norm().ln())
        })
        .collect();
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
    let order =
        pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    checks.push(("ngfpk to sct order", order >= 1.9, format!("{order:.2}")));

    // no diffusion acts on the position coordinate
    let cfg = config("duffing_tau03.toml");
    let exp = cfg.resolve().unwrap();
    let grid = exp.grid;
    let points = grid.points();
    let times: Vec<f64> = history.times().to_vec();
    let mut column = 0.0f64;
    for eq in [Equation::Sct, Equation::Ngfpk] {
        let assembler = DiffusionAssembler::new(eq, exp.model.as_ref(), &exp.spec).unwrap();
        let field = assembler
            .field(exp.model.as_ref(), 1.0, &points, &times, &history)
            .unwrap();
        column = column.max(field.column_max_abs(0));
    }
    checks.push(("position column of D", column == 0.0, format!("{column:e}")));

    // mass conservation and closure iterations over the full runs
    let stats: Vec<_> = solver_runs
        .iter()
        .filter_map(|s| s.solver.as_ref().map(|st| (s, st)))
        .collect();
    let drift = stats.iter().map(|(_, st)| st.max_mass_drift).fold(0.0, f64::max);
    checks.push((
        "mass drift",
        drift <= 1e-3 && !stats.is_empty(),
        format!("{drift:.1e} over {} runs", stats.len()),
    ));
    let closure: Vec<usize> = stats
        .iter()
        .filter(|(s, _)| s.method.as_deref() == Some("ngfpk"))
        .map(|(_, st)| st.max_closure_iterations)
        .collect();
    let tol_ok = stats.iter().all(|(s, _)| s.config.solver.closure_tol <= 1e-6);
    let closure_max = closure.iter().copied().max().unwrap_or(usize::MAX);
    checks.push((
        "closure iterations",
        !closure.is_empty() && closure_max <= 2 && tol_ok,
        format!("{closure:?}"),
    ));

    // Monte Carlo reproducibility
    let cfg = config("duffing_tau01.toml");
    let exp = cfg.resolve().unwrap();
    let mc = |seed: u64| {
        let config = McConfig {
            n_paths: 2000,
            output_times: vec![1.0],
            seed,
            ..McConfig::default()
        };
        simulate(exp.model.as_ref(), &exp.spec, &exp.initial, &config)
            .unwrap()
            .samples
    };
    let (a, b, c) = (mc(11), mc(11), mc(12));
    checks.push((
        "mc seed",
        a == b && a != c,
        format!("same seed equal {}, new seed differs {}", a == b, a != c),
    ));

    // sampled excitation reproduces its kernel
    let grid_t: Vec<f64> = (0..=400).map(|k| k as f64 * 0.01).collect();
    let sampler = PathSampler::new(&exp.spec, &grid_t, None, SamplingMethod::Auto).unwrap();
    let n_pairs = 5000u64;
    let mut paths = Vec::with_capacity(2 * n_pairs as usize);
    for p in 0..n_pairs {
        let (u, v) = sampler.draw_pair(5, p);
        paths.push(u.noise);
        paths.push(v.noise);
    }
    let kernel = match exp.spec.kernel {
        pdfevo::excitation::Kernel::GaussianFilter {
            variance,
            shape,
            peak_freq,
        } => move |u: f64| variance * (-(shape * u).powi(2)).exp() * (peak_freq * u).cos(),
        ref k => panic!("unexpected kernel {k:?}"),
    };
    let n = paths.len() as f64;
    let base = 100;
    let mut worst_z = 0.0f64;
    for lag in [0usize, 5, 20, 50] {
        let ma = paths.iter().map(|p| p[base]).sum::<f64>() / n;
        let mb = paths.iter().map(|p| p[base + lag]).sum::<f64>() / n;
        let cov = paths.iter().map(|p| (p[base] - ma) * (p[base + lag] - mb)).sum::<f64>() / (n - 1.0);
        let (k0, k) = (kernel(0.0), kernel(lag as f64 * 0.01));
        let stderr = ((k0 * k0 + k * k) / n).sqrt();
        worst_z = worst_z.max((cov - k).abs() / stderr);
    }
    checks.push(("sampled covariance", worst_z <= 3.0, format!("{worst_z:.2} stderr")));

    let wall = start.elapsed().as_secs_f64();
    let pass = checks.iter().all(|c| c.1) && wall < 120.0;
    let detail: Vec<String> = checks
        .iter()
        .map(|(name, ok, v)| format!("{name} {} ({v})", if *ok { "ok" } else { "failed" }))
        .collect();
    report.line(
        7,
        "property suites",
        pass,
        format!("{}; {wall:.0} s", detail.join("; ")),
    );
}

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut report = Report { failures: Vec::new() };
    let mut solver_runs = Vec::new();
    criterion_1(&mut report, root, &mut solver_runs);
    criterion_2(&mut report, root, &mut solver_runs);
    criterion_3(&mut report, root, &mut solver_runs);
    criterion_4(&mut report, root, &mut solver_runs);
    let mc_dir = criterion_5(&mut report, root, &mut solver_runs);
    criterion_6(&mut report, root, &mc_dir);
    criterion_7(&mut report, &solver_runs);
    assert!(
        report.failures.is_empty(),
        "failed criteria:\n{}",
        report.failures.join("\n")
    );
}
