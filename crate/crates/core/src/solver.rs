//! Conservative finite-volume discretisation of the pdf-evolution equation
//! `∂t f = −Σₙ ∂ₙ Jₙ`, `Jₙ = vₙ f − Σ_ν ∂_ν[S_νn f]`, with Crank-Nicolson time
//! stepping and the per-step moment closure iteration.
//!
//! `v = h + b m_Ξ(t)` and `S` is the symmetric part of the assembled diffusion
//! matrix. Fluxes vanish on the domain boundary, so the trapezoid mass is
//! conserved up to the linear-solver tolerance.

use log::{debug, warn};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::coefficients::{DiffusionAssembler, DiffusionField, Equation, MomentHistory};
use crate::dynamics::{Monomial, SystemModel};
use crate::error::{Error, Result};
use crate::excitation::{correlation_time, ExcitationSpec};
use crate::grid::{GridSpec, PdfField};

/// Discretisation of the advective flux.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Advection {
    /// Second-order central face average (upwind on faces touching the boundary).
    #[default]
    Central,
    /// Central, switching to first-order upwind where the cell Péclet number exceeds 2.
    Hybrid,
}

/// Treatment of an indefinite local diffusion matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionTreatment {
    /// `Project` for nonlinear models, `Raw` for linear ones. A linear model
    /// keeps a Gaussian density, whose covariance stays positive even when the
    /// symmetric part of the diffusion matrix is indefinite.
    #[default]
    Auto,
    /// Project each local diffusion matrix onto the positive semidefinite
    /// cone. Where the assembled matrix is indefinite the equation is
    /// anti-diffusive and the discrete solution loses positivity.
    Project,
    /// Discretise the diffusion matrix as assembled.
    Raw,
}

impl DiffusionTreatment {
    pub fn projects(self, model: &dyn SystemModel) -> bool {
        match self {
            Self::Auto => !model.is_linear(),
            Self::Project => true,
            Self::Raw => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Time step; `None` picks `min(0.01, τ_cor / 20)`.
    pub dt: Option<f64>,
    pub closure_tol: f64,
    pub max_closure_iterations: usize,
    pub advection: Advection,
    pub diffusion: DiffusionTreatment,
    /// Rescale to unit mass after every step.
    pub renormalize: bool,
    pub linear_tol: f64,
    pub max_linear_iterations: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            dt: None,
            closure_tol: 1e-6,
            max_closure_iterations: 10,
            advection: Advection::Central,
            diffusion: DiffusionTreatment::Auto,
            renormalize: false,
            linear_tol: 1e-10,
            max_linear_iterations: 2000,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(dt) = self.dt {
            if !(dt > 0.0) {
                return Err(Error::Parameter(format!("time step {dt} must be positive")));
            }
        }
        if !(self.closure_tol > 0.0) {
            return Err(Error::Parameter("closure tolerance must be positive".into()));
        }
        if self.max_closure_iterations == 0 {
            return Err(Error::Parameter("at least one closure iteration is required".into()));
        }
        if !(self.linear_tol > 0.0) {
            return Err(Error::Parameter("linear tolerance must be positive".into()));
        }
        Ok(())
    }

    /// The configured step, or `min(0.01, τ_cor / 20)`.
    pub fn time_step(&self, spec: &ExcitationSpec) -> Result<f64> {
        if let Some(dt) = self.dt {
            return Ok(dt);
        }
        if spec.kernel.is_white() || spec.kernel.variance() == 0.0 {
            return Ok(0.01);
        }
        Ok(0.01f64.min(correlation_time(&spec.kernel)? / 20.0))
    }
}

/// Linear operator `L` with `∂t f = L f`, stored as a 9-point stencil per node.
#[derive(Debug, Clone)]
pub struct Operator {
    n1: usize,
    n2: usize,
    coeffs: Vec<[f64; 9]>,
}

#[inline]
fn slot(di: isize, dj: isize) -> usize {
    ((di + 1) * 3 + (dj + 1)) as usize
}

impl Operator {
    pub fn zero(grid: &GridSpec) -> Self {
        Self {
            n1: grid.nodes[0],
            n2: grid.nodes[1],
            coeffs: vec![[0.0; 9]; grid.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Coefficient of `f(i + di, j + dj)` in row `(i, j)`.
    pub fn coeff(&self, k: usize, di: isize, dj: isize) -> f64 {
        self.coeffs[k][slot(di, dj)]
    }

    pub fn diagonal(&self, k: usize) -> f64 {
        self.coeffs[k][4]
    }

    pub fn max_abs(&self) -> f64 {
        self.coeffs
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    #[inline]
    fn add(&mut self, row: (usize, usize), col: (usize, usize), v: f64) {
        let di = col.0 as isize - row.0 as isize;
        let dj = col.1 as isize - row.1 as isize;
        self.coeffs[row.0 * self.n2 + row.1][slot(di, dj)] += v;
    }

    /// `out = L f`.
    pub fn apply(&self, f: &[f64], out: &mut [f64]) {
        let (n1, n2) = (self.n1, self.n2);
        for i in 0..n1 {
            let i_lo = if i == 0 { 0 } else { i - 1 };
            let i_hi = (i + 1).min(n1 - 1);
            for j in 0..n2 {
                let k = i * n2 + j;
                let c = &self.coeffs[k];
                let j_lo = if j == 0 { 0 } else { j - 1 };
                let j_hi = (j + 1).min(n2 - 1);
                let mut acc = 0.0;
                for ii in i_lo..=i_hi {
                    let base = ii * n2;
                    let di = (ii + 1 - i) * 3;
                    for jj in j_lo..=j_hi {
                        acc += c[di + (jj + 1 - j)] * f[base + jj];
                    }
                }
                out[k] = acc;
            }
        }
    }
}

/// Nearest positive semidefinite matrix to `[[a, b], [b, d]]` in the Frobenius
/// norm: the negative eigenvalue, if any, is set to zero.
pub fn psd_projection(a: f64, b: f64, d: f64) -> [f64; 3] {
    let mid = 0.5 * (a + d);
    let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    let (hi, lo) = (mid + rad, mid - rad);
    if lo >= 0.0 {
        return [a, b, d];
    }
    if hi <= 0.0 {
        return [0.0, 0.0, 0.0];
    }
    // eigenvector of the larger eigenvalue, from whichever row is better conditioned
    let (vx, vy) = if a >= d { (hi - d, b) } else { (b, hi - a) };
    let norm2 = vx * vx + vy * vy;
    let s = hi / norm2;
    [s * vx * vx, s * vx * vy, s * vy * vy]
}

/// Discretises `−∇·J` for drift `h(x, t) + b m_Ξ(t)` and the symmetric part of
/// `field` on `grid`, in conservative face-flux form. With `project`, the
/// local diffusion matrix is first replaced by its positive semidefinite
/// projection.
pub fn assemble_operator(
    model: &dyn SystemModel,
    t: f64,
    mean_forcing: &[f64],
    field: &DiffusionField,
    grid: &GridSpec,
    advection: Advection,
    project: bool,
) -> Result<Operator> {
    if model.dim() != 2 || field.dim() != 2 || mean_forcing.len() != 2 {
        return Err(Error::Unsupported(
            "the grid solver handles two-state systems only".into(),
        ));
    }
    if field.n_nodes() != grid.len() {
        return Err(Error::GridMismatch(format!(
            "diffusion field has {} nodes, grid has {}",
            field.n_nodes(),
            grid.len()
        )));
    }
    let [n1, n2] = grid.nodes;
    let (h1, h2) = (grid.spacing(0), grid.spacing(1));
    let n = grid.len();
    let mut v1 = vec![0.0; n];
    let mut v2 = vec![0.0; n];
    let mut s11 = vec![0.0; n];
    let mut s12 = vec![0.0; n];
    let mut s22 = vec![0.0; n];
    let mut h = [0.0; 2];
    for k in 0..n {
        let x = grid.point(k);
        model.drift(&x, t, &mut h);
        v1[k] = h[0] + mean_forcing[0];
        v2[k] = h[1] + mean_forcing[1];
        s11[k] = field.sym(k, 0, 0);
        s12[k] = field.sym(k, 0, 1);
        s22[k] = field.sym(k, 1, 1);
        if project {
            [s11[k], s12[k], s22[k]] = psd_projection(s11[k], s12[k], s22[k]);
        }
        let vals = [v1[k], v2[k], s11[k], s12[k], s22[k]];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Assembly { x: x.to_vec() });
        }
    }
    let idx = |i: usize, j: usize| i * n2 + j;
    let mut op = Operator::zero(grid);
    let mut terms: Vec<((usize, usize), f64)> = Vec::with_capacity(10);

    // central difference of g along the transverse axis at a node, one-sided on the edge
    fn transverse(pos: usize, len: usize, h: f64, scale: f64, mut push: impl FnMut(usize, f64)) {
        if pos == 0 {
            push(1, scale / h);
            push(0, -scale / h);
        } else if pos + 1 == len {
            push(pos, scale / h);
            push(pos - 1, -scale / h);
        } else {
            push(pos + 1, scale / (2.0 * h));
            push(pos - 1, -scale / (2.0 * h));
        }
    }

    // faces normal to x₁
    for i in 0..n1 - 1 {
        let (wl, wr) = (grid.weight(0, i), grid.weight(0, i + 1));
        for j in 0..n2 {
            let (l, r) = (idx(i, j), idx(i + 1, j));
            terms.clear();
            let s_face = 0.5 * (s11[l] + s11[r]);
            let v_face = 0.5 * (v1[l] + v1[r]);
            let upwind =
                i == 0 || i + 2 == n1 || (advection == Advection::Hybrid && v_face.abs() * h1 > 2.0 * s_face.max(0.0));
            if upwind {
                if v_face >= 0.0 {
                    terms.push(((i, j), v1[l]));
                } else {
                    terms.push(((i + 1, j), v1[r]));
                }
            } else {
                terms.push(((i, j), 0.5 * v1[l]));
                terms.push(((i + 1, j), 0.5 * v1[r]));
            }
            terms.push(((i + 1, j), -s11[r] / h1));
            terms.push(((i, j), s11[l] / h1));
            for ii in [i, i + 1] {
                transverse(j, n2, h2, -0.5, |jj, c| terms.push(((ii, jj), c * s12[idx(ii, jj)])));
            }
            for &(col, c) in &terms {
                op.add((i, j), col, -c / wl);
                op.add((i + 1, j), col, c / wr);
            }
        }
    }
    // faces normal to x₂
    for j in 0..n2 - 1 {
        let (wl, wr) = (grid.weight(1, j), grid.weight(1, j + 1));
        for i in 0..n1 {
            let (l, r) = (idx(i, j), idx(i, j + 1));
            terms.clear();
            let s_face = 0.5 * (s22[l] + s22[r]);
            let v_face = 0.5 * (v2[l] + v2[r]);
            let upwind =
                j == 0 || j + 2 == n2 || (advection == Advection::Hybrid && v_face.abs() * h2 > 2.0 * s_face.max(0.0));
            if upwind {
                if v_face >= 0.0 {
                    terms.push(((i, j), v2[l]));
                } else {
                    terms.push(((i, j + 1), v2[r]));
                }
            } else {
                terms.push(((i, j), 0.5 * v2[l]));
                terms.push(((i, j + 1), 0.5 * v2[r]));
            }
            terms.push(((i, j + 1), -s22[r] / h2));
            terms.push(((i, j), s22[l] / h2));
            for jj in [j, j + 1] {
                transverse(i, n1, h1, -0.5, |ii, c| terms.push(((ii, jj), c * s12[idx(ii, jj)])));
            }
            for &(col, c) in &terms {
                op.add((i, j), col, -c / wl);
                op.add((i, j + 1), col, c / wr);
            }
        }
    }
    Ok(op)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Incomplete LU factorisation of `I − c L` on the 9-point pattern, stored
/// in place: unit lower factor below the diagonal, upper factor on and above.
struct Ilu0 {
    n1: usize,
    n2: usize,
    lu: Vec<[f64; 9]>,
}

/// Offsets of the pattern entries that precede a row, in index order.
const LOWER: [(isize, isize); 4] = [(-1, -1), (-1, 0), (-1, 1), (0, -1)];
/// Offsets of the pattern entries that follow a row, in index order.
const UPPER: [(isize, isize); 4] = [(0, 1), (1, -1), (1, 0), (1, 1)];

impl Ilu0 {
    fn new(op: &Operator, c: f64) -> Self {
        let (n1, n2) = (op.n1, op.n2);
        let mut lu: Vec<[f64; 9]> = op
            .coeffs
            .iter()
            .map(|row| {
                let mut a = row.map(|v| -c * v);
                a[4] += 1.0;
                a
            })
            .collect();
        let inside = |i: usize, j: usize, di: isize, dj: isize| -> bool {
            let (a, b) = (i as isize + di, j as isize + dj);
            a >= 0 && b >= 0 && (a as usize) < n1 && (b as usize) < n2
        };
        for i in 0..n1 {
            for j in 0..n2 {
                let row = i * n2 + j;
                for &(di, dj) in &LOWER {
                    if !inside(i, j, di, dj) {
                        continue;
                    }
                    let pivot_row = ((i as isize + di) as usize) * n2 + (j as isize + dj) as usize;
                    let pivot = lu[pivot_row][4];
                    let l = if pivot.abs() > 1e-300 {
                        lu[row][slot(di, dj)] / pivot
                    } else {
                        0.0
                    };
                    lu[row][slot(di, dj)] = l;
                    if l == 0.0 {
                        continue;
                    }
                    for &(ei, ej) in &UPPER {
                        // entry (pivot, pivot + e) seen from this row
                        let (oi, oj) = (di + ei, dj + ej);
                        if oi.abs() > 1 || oj.abs() > 1 || (oi, oj) <= (di, dj) {
                            continue;
                        }
                        if !inside(i, j, oi, oj) {
                            continue;
                        }
                        let u = lu[pivot_row][slot(ei, ej)];
                        lu[row][slot(oi, oj)] -= l * u;
                    }
                }
            }
        }
        Self { n1, n2, lu }
    }

    /// `out = (LU)⁻¹ v`.
    fn solve(&self, v: &[f64], out: &mut [f64]) {
        let (n1, n2) = (self.n1, self.n2);
        for i in 0..n1 {
            for j in 0..n2 {
                let row = i * n2 + j;
                let mut acc = v[row];
                for &(di, dj) in &LOWER {
                    let (a, b) = (i as isize + di, j as isize + dj);
                    if a >= 0 && b >= 0 && (b as usize) < n2 {
                        acc -= self.lu[row][slot(di, dj)] * out[a as usize * n2 + b as usize];
                    }
                }
                out[row] = acc;
            }
        }
        for i in (0..n1).rev() {
            for j in (0..n2).rev() {
                let row = i * n2 + j;
                let mut acc = out[row];
                for &(di, dj) in &UPPER {
                    let (a, b) = (i as isize + di, j as isize + dj);
                    if b >= 0 && (a as usize) < n1 && (b as usize) < n2 {
                        acc -= self.lu[row][slot(di, dj)] * out[a as usize * n2 + b as usize];
                    }
                }
                let d = self.lu[row][4];
                out[row] = if d.abs() > 1e-300 { acc / d } else { acc };
            }
        }
    }
}

/// Solves `(I − c L) x = rhs` by ILU(0)-preconditioned BiCGSTAB, starting
/// from `x`. Returns the iteration count.
fn solve_shifted(op: &Operator, c: f64, rhs: &[f64], x: &mut [f64], tol: f64, max_iter: usize) -> Result<usize> {
    let n = rhs.len();
    let apply = |v: &[f64], out: &mut [f64]| {
        op.apply(v, out);
        for (o, vi) in out.iter_mut().zip(v) {
            *o = vi - c * *o;
        }
    };
    let ilu = Ilu0::new(op, c);
    let precond = |v: &[f64], out: &mut [f64]| ilu.solve(v, out);
    let b_norm = norm(rhs);
    if b_norm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(0);
    }
    let target = tol * b_norm;
    let mut r = vec![0.0; n];
    apply(x, &mut r);
    for k in 0..n {
        r[k] = rhs[k] - r[k];
    }
    if norm(&r) <= target {
        return Ok(0);
    }
    let mut r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut tv = vec![0.0; n];
    let mut res = norm(&r);
    for it in 1..=max_iter {
        let rho_new = dot(&r_hat, &r);
        if rho_new.abs() < 1e-300 || omega == 0.0 {
            // breakdown: restart the shadow residual
            r_hat.copy_from_slice(&r);
            rho = 1.0;
            alpha = 1.0;
            omega = 1.0;
            v.iter_mut().for_each(|e| *e = 0.0);
            p.iter_mut().for_each(|e| *e = 0.0);
            continue;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for k in 0..n {
            p[k] = r[k] + beta * (p[k] - omega * v[k]);
        }
        precond(&p, &mut y);
        apply(&y, &mut v);
        let denom = dot(&r_hat, &v);
        if denom == 0.0 {
            return Err(Error::Stagnation {
                iterations: it,
                residual: res / b_norm,
            });
        }
        alpha = rho / denom;
        for k in 0..n {
            s[k] = r[k] - alpha * v[k];
        }
        if norm(&s) <= target {
            for k in 0..n {
                x[k] += alpha * y[k];
            }
            return Ok(it);
        }
        precond(&s, &mut z);
        apply(&z, &mut tv);
        let tt = dot(&tv, &tv);
        omega = if tt > 0.0 { dot(&tv, &s) / tt } else { 0.0 };
        for k in 0..n {
            x[k] += alpha * y[k] + omega * z[k];
            r[k] = s[k] - omega * tv[k];
        }
        res = norm(&r);
        if res <= target {
            return Ok(it);
        }
    }
    Err(Error::Stagnation {
        iterations: max_iter,
        residual: res / b_norm,
    })
}

/// Outcome of one Crank-Nicolson step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub field: PdfField,
    pub linear_iterations: usize,
    /// Mass removed by clipping negative values.
    pub clipped: f64,
}

/// `(I − Δt/2 L₁) f' = (I + Δt/2 L₀) f`, then negative values are clipped.
pub fn step(f: &PdfField, l0: &Operator, l1: &Operator, dt: f64, config: &SolverConfig) -> Result<StepOutcome> {
    let n = f.values.len();
    if l0.len() != n || l1.len() != n {
        return Err(Error::GridMismatch("operators and density differ in size".into()));
    }
    let mut rhs = vec![0.0; n];
    l0.apply(&f.values, &mut rhs);
    for (r, v) in rhs.iter_mut().zip(&f.values) {
        *r = v + 0.5 * dt * *r;
    }
    let mut x = f.values.clone();
    let iters = solve_shifted(
        l1,
        0.5 * dt,
        &rhs,
        &mut x,
        config.linear_tol,
        config.max_linear_iterations,
    )?;
    let mut clipped = 0.0;
    for (k, v) in x.iter_mut().enumerate() {
        if *v < 0.0 {
            clipped -= *v * f.grid.volume(k);
            *v = 0.0;
        }
    }
    let mut field = PdfField {
        grid: f.grid.clone(),
        values: x,
        t: f.t + dt,
    };
    if config.renormalize {
        field.normalize();
    }
    Ok(StepOutcome {
        field,
        linear_iterations: iters,
        clipped,
    })
}

/// How the mean Jacobian is recovered from a density.
#[derive(Debug, Clone)]
enum Closure {
    Moments(Vec<Monomial>),
    Quadrature,
}

impl Closure {
    fn for_model(model: &dyn SystemModel) -> Self {
        match model.moment_basis() {
            Some(b) => Closure::Moments(b),
            None => Closure::Quadrature,
        }
    }

    fn measure(&self, model: &dyn SystemModel, f: &PdfField, t: f64) -> Vec<f64> {
        match self {
            Closure::Moments(basis) => basis.iter().map(|m| f.moment(m)).collect(),
            Closure::Quadrature => f.mean_jacobian(model, t).iter().copied().collect(),
        }
    }

    fn to_r(&self, model: &dyn SystemModel, v: &[f64], t: f64) -> Result<DMatrix<f64>> {
        match self {
            Closure::Moments(_) => model.mean_jacobian(v, t),
            Closure::Quadrature => {
                let n = model.dim();
                Ok(DMatrix::from_column_slice(n, n, v))
            }
        }
    }
}

/// Constant, linear, then quadratic extrapolation through the last three values.
fn extrapolate(history: &MomentHistory) -> Vec<f64> {
    let m = history.moments();
    let n = m.len();
    match n {
        0 => Vec::new(),
        1 => m[0].clone(),
        2 => m[1].iter().zip(&m[0]).map(|(a, b)| 2.0 * a - b).collect(),
        _ => (0..m[n - 1].len())
            .map(|i| 3.0 * m[n - 1][i] - 3.0 * m[n - 2][i] + m[n - 3][i])
            .collect(),
    }
}

/// Diagnostics of one committed step.
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub t: f64,
    pub mass: f64,
    pub min: f64,
    pub clipped: f64,
    pub closure_iterations: usize,
    pub closure_delta: f64,
    pub linear_iterations: usize,
}

#[derive(Debug, Clone)]
pub struct EvolveOutput {
    pub equation: Equation,
    pub dt: f64,
    /// Densities at the requested output times (nearest committed step).
    pub snapshots: Vec<PdfField>,
    pub history: MomentHistory,
    pub steps: Vec<StepRecord>,
}

impl EvolveOutput {
    pub fn max_closure_iterations(&self) -> usize {
        self.steps.iter().map(|s| s.closure_iterations).max().unwrap_or(0)
    }

    pub fn max_mass_drift(&self) -> f64 {
        self.steps.iter().map(|s| (s.mass - 1.0).abs()).fold(0.0, f64::max)
    }

    pub fn snapshot_at(&self, t: f64) -> Option<&PdfField> {
        self.snapshots
            .iter()
            .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
            .filter(|f| (f.t - t).abs() <= 0.5 * self.dt + 1e-9)
    }
}

/// Evolves `f0` under `equation` up to the largest output time.
pub fn evolve(
    model: &dyn SystemModel,
    spec: &ExcitationSpec,
    f0: &PdfField,
    config: &SolverConfig,
    equation: Equation,
    output_times: &[f64],
) -> Result<EvolveOutput> {
    config.validate()?;
    f0.grid.validate()?;
    let dt = config.time_step(spec)?;
    let t0 = f0.t;
    let t_end = output_times.iter().copied().fold(t0, f64::max);
    let n_steps = ((t_end - t0) / dt - 1e-9).ceil().max(0.0) as usize;
    let mut outputs: Vec<f64> = output_times.to_vec();
    outputs.sort_by(f64::total_cmp);

    let assembler_spec = ExcitationSpec { t0, ..spec.clone() };
    let mut assembler = DiffusionAssembler::new(equation, model, &assembler_spec)?;
    let closure = Closure::for_model(model);
    let points = f0.grid.points();
    let forcing = spec.forcing.clone();
    let mean_forcing = |t: f64| -> Vec<f64> {
        let m = spec.mean_at(t);
        forcing.iter().map(|b| b * m).collect()
    };

    let mut history = MomentHistory::new();
    let v0 = closure.measure(model, f0, t0);
    history.push(t0, closure.to_r(model, &v0, t0)?, v0)?;
    let mut times = vec![t0];

    let field0 = assembler.field(model, t0, &points, &times, &history)?;
    let project = config.diffusion.projects(model);
    let mut l_prev = assemble_operator(
        model,
        t0,
        &mean_forcing(t0),
        &field0,
        &f0.grid,
        config.advection,
        project,
    )?;

    let mut f = f0.clone();
    let mut snapshots = Vec::new();
    let mut next_out = 0;
    while next_out < outputs.len() && outputs[next_out] <= t0 + 0.5 * dt {
        snapshots.push(f.clone());
        next_out += 1;
    }
    let mut steps = Vec::with_capacity(n_steps);

    for k in 1..=n_steps {
        let t1 = t0 + k as f64 * dt;
        times.push(t1);
        let mut guess = extrapolate(&history);
        let max_iter = if equation.needs_closure() {
            config.max_closure_iterations
        } else {
            1
        };
        let mut committed = None;
        let mut delta = f64::INFINITY;
        for it in 1..=max_iter {
            history.push(t1, closure.to_r(model, &guess, t1)?, guess.clone())?;
            let field = assembler.field(model, t1, &points, &times, &history);
            history.pop();
            let field = field?;
            let l1 = assemble_operator(
                model,
                t1,
                &mean_forcing(t1),
                &field,
                &f0.grid,
                config.advection,
                project,
            )?;
            let out = step(&f, &l_prev, &l1, dt, config)?;
            let measured = closure.measure(model, &out.field, t1);
            delta = measured
                .iter()
                .zip(&guess)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if !equation.needs_closure() || delta < config.closure_tol {
                committed = Some((out, l1, measured, it));
                break;
            }
            guess = measured;
        }
        let (out, l1, measured, iterations) = committed.ok_or(Error::NonConvergence {
            t: t1,
            iterations: max_iter,
            delta,
        })?;
        history.push(t1, closure.to_r(model, &measured, t1)?, measured)?;
        assembler.commit(&history)?;
        l_prev = l1;
        f = out.field;
        f.t = t1;
        let record = StepRecord {
            t: t1,
            mass: f.mass(),
            min: f.min(),
            clipped: out.clipped,
            closure_iterations: iterations,
            closure_delta: if equation.needs_closure() { delta } else { 0.0 },
            linear_iterations: out.linear_iterations,
        };
        if out.clipped > 1e-8 {
            debug!("t = {t1:.4}: clipped mass {:.3e}", out.clipped);
        }
        steps.push(record);
        while next_out < outputs.len() && outputs[next_out] <= t1 + 0.5 * dt {
            snapshots.push(f.clone());
            next_out += 1;
        }
    }
    if f.boundary_ratio() > 1e-6 {
        warn!(
            "density reaches the domain boundary (edge/peak = {:.2e}); consider a larger grid",
            f.boundary_ratio()
        );
    }
    Ok(EvolveOutput {
        equation,
        dt,
        snapshots,
        history,
        steps,
    })
}
