//! Drift and diffusion coefficients of the pdf-evolution equations.
//!
//! All models share the structure `D_{νn}(x, t) = k_ν(x, t) b_n + (G c(t))_ν b_n`
//! where `b` is the forcing vector of the scalar excitation,
//! `k(x, t) = ∫ C(t, s) K(x, t, s) b ds` is the history convolution and the
//! second term couples the initial state with the excitation.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{LinearOscillator, SystemModel};
use crate::error::{Error, Result};
use crate::excitation::{ExcitationSpec, Kernel, DECAY_CUTOFF};
use crate::propagator::{exp2, magnus, magnus2_to_end, matrix_exp, MatrixTrajectory};
use crate::quadrature::{adaptive_simpson, trapezoid_weights};

/// Refinement of each history interval in the convolution quadrature.
pub const HISTORY_REFINEMENT: usize = 4;

/// Which pdf-evolution equation to assemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Equation {
    /// Classical Fokker-Planck with a memoryless kernel.
    Fpk,
    /// Small-correlation-time kernel `I + J^h(x, t)(t − s)`.
    Sct,
    /// History-dependent kernel `exp(Δ(x, t)(t − s)) Φ[R](t; s)`.
    Ngfpk,
    /// Exact kernel `exp(J(t − s))` of a linear system.
    LinearExact,
}

impl Equation {
    /// True when the coefficients depend on the moment history.
    pub fn needs_closure(self) -> bool {
        matches!(self, Equation::Ngfpk)
    }
}

impl std::fmt::Display for Equation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Equation::Fpk => "fpk",
            Equation::Sct => "sct",
            Equation::Ngfpk => "ngfpk",
            Equation::LinearExact => "linear_exact",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Equation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "fpk" => Ok(Equation::Fpk),
            "sct" => Ok(Equation::Sct),
            "ngfpk" => Ok(Equation::Ngfpk),
            "linear_exact" => Ok(Equation::LinearExact),
            other => Err(Error::Parameter(format!("unknown method '{other}'"))),
        }
    }
}

/// Time-stamped mean Jacobians and the moments they were built from.
#[derive(Debug, Clone, Default)]
pub struct MomentHistory {
    times: Vec<f64>,
    r: Vec<DMatrix<f64>>,
    moments: Vec<Vec<f64>>,
}

impl MomentHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: f64, r: DMatrix<f64>, moments: Vec<f64>) -> Result<()> {
        if let Some(&last) = self.times.last() {
            if !(t > last) {
                return Err(Error::Parameter(format!("history time {t} does not follow {last}")));
            }
        }
        self.times.push(t);
        self.r.push(r);
        self.moments.push(moments);
        Ok(())
    }

    /// Drops the most recent entry (used for tentative closure updates).
    pub fn pop(&mut self) -> Option<(f64, DMatrix<f64>, Vec<f64>)> {
        let t = self.times.pop()?;
        Some((t, self.r.pop().unwrap(), self.moments.pop().unwrap()))
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn r_matrices(&self) -> &[DMatrix<f64>] {
        &self.r
    }

    pub fn moments(&self) -> &[Vec<f64>] {
        &self.moments
    }

    pub fn last_time(&self) -> Option<f64> {
        self.times.last().copied()
    }

    /// Fails with the uncovered interval unless `[lo, hi]` lies within the history.
    pub fn covers(&self, lo: f64, hi: f64) -> Result<()> {
        let (first, last) = match (self.times.first(), self.times.last()) {
            (Some(&a), Some(&b)) => (a, b),
            _ => return Err(Error::HistoryGap { from: lo, to: hi }),
        };
        let slack = 1e-9 * (1.0 + hi.abs());
        if lo < first - slack {
            return Err(Error::HistoryGap {
                from: lo,
                to: first.min(hi),
            });
        }
        if hi > last + slack {
            return Err(Error::HistoryGap {
                from: last.max(lo),
                to: hi,
            });
        }
        Ok(())
    }

    /// Piecewise-linear `R` restricted to the samples spanning `[lo, hi]`.
    pub fn trajectory(&self, lo: f64, hi: f64) -> Result<MatrixTrajectory> {
        self.covers(lo, hi)?;
        let a = self.times.partition_point(|&x| x <= lo).saturating_sub(1);
        let b = (self.times.partition_point(|&x| x < hi) + 1).min(self.times.len());
        if b - a == 1 {
            return Ok(MatrixTrajectory::constant(self.r[a].clone(), lo.min(hi), hi.max(lo)));
        }
        MatrixTrajectory::new(self.times[a..b].to_vec(), self.r[a..b].to_vec())
    }
}

/// Diffusion matrix at every node of a grid, stored row-major per node.
#[derive(Debug, Clone)]
pub struct DiffusionField {
    dim: usize,
    values: Vec<f64>,
}

impl DiffusionField {
    pub fn zeros(n_nodes: usize, dim: usize) -> Self {
        Self {
            dim,
            values: vec![0.0; n_nodes * dim * dim],
        }
    }

    /// Same matrix at every node.
    pub fn uniform(n_nodes: usize, d: &DMatrix<f64>) -> Self {
        let dim = d.nrows();
        let mut values = Vec::with_capacity(n_nodes * dim * dim);
        for _ in 0..n_nodes {
            for i in 0..dim {
                for j in 0..dim {
                    values.push(d[(i, j)]);
                }
            }
        }
        Self { dim, values }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_nodes(&self) -> usize {
        self.values.len() / (self.dim * self.dim)
    }

    #[inline]
    pub fn get(&self, node: usize, i: usize, j: usize) -> f64 {
        self.values[(node * self.dim + i) * self.dim + j]
    }

    #[inline]
    fn set(&mut self, node: usize, i: usize, j: usize, v: f64) {
        self.values[(node * self.dim + i) * self.dim + j] = v;
    }

    /// Symmetric part `(D_ij + D_ji) / 2`.
    #[inline]
    pub fn sym(&self, node: usize, i: usize, j: usize) -> f64 {
        0.5 * (self.get(node, i, j) + self.get(node, j, i))
    }

    pub fn at(&self, node: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| self.get(node, i, j))
    }

    /// Index of the first node with a non-finite entry.
    pub fn first_non_finite(&self) -> Option<usize> {
        let per = self.dim * self.dim;
        self.values.iter().position(|v| !v.is_finite()).map(|k| k / per)
    }

    /// Largest `|D_ij|` over all nodes and rows for column `j`.
    pub fn column_max_abs(&self, j: usize) -> f64 {
        (0..self.n_nodes())
            .flat_map(|k| (0..self.dim).map(move |i| (k, i)))
            .map(|(k, i)| self.get(k, i, j).abs())
            .fold(0.0, f64::max)
    }
}

/// `I + J^h(x, t)(t − s)`.
pub fn sct_kernel(model: &dyn SystemModel, x: &[f64], t: f64, s: f64) -> DMatrix<f64> {
    let n = model.dim();
    DMatrix::identity(n, n) + model.jacobian(x, t) * (t - s)
}

/// `exp(Δ(x, t)(t − s)) Φ[R](t; s)` with `Δ = J^h − R(t)` and `Φ` from the
/// two-term Magnus expansion of the history trajectory.
pub fn ngfpk_kernel(
    model: &dyn SystemModel,
    x: &[f64],
    t: f64,
    s: f64,
    history: &MomentHistory,
) -> Result<DMatrix<f64>> {
    let traj = history.trajectory(s, t)?;
    let phi = magnus(&traj, t, s, 2)?.value;
    let delta = model.jacobian(x, t) - traj.at(t);
    Ok(matrix_exp(&(delta * (t - s))) * phi)
}

/// Nodes of the convolution quadrature over `[max(t₀, t − horizon), t]`:
/// history times inside the window, each interval split in `HISTORY_REFINEMENT`.
/// The window start snaps down to a history time.
fn window_nodes(times: &[f64], t0: f64, t: f64, horizon: f64) -> Result<Vec<f64>> {
    let slack = 1e-9 * (1.0 + t.abs());
    let first = *times.first().ok_or(Error::HistoryGap { from: t0, to: t })?;
    let last = *times.last().unwrap();
    if first > t0 + slack {
        return Err(Error::HistoryGap { from: t0, to: first });
    }
    if last < t - slack {
        return Err(Error::HistoryGap { from: last, to: t });
    }
    let lo = (t - horizon).max(t0);
    let a = times.partition_point(|&x| x <= lo + slack).saturating_sub(1);
    let mut pts: Vec<f64> = times[a..].iter().copied().take_while(|&x| x < t - slack).collect();
    if pts.is_empty() {
        return Ok(vec![t]);
    }
    pts[0] = pts[0].max(t0);
    pts.push(t);
    let mut nodes = Vec::with_capacity((pts.len() - 1) * HISTORY_REFINEMENT + 1);
    for w in pts.windows(2) {
        for k in 0..HISTORY_REFINEMENT {
            nodes.push(w[0] + (w[1] - w[0]) * k as f64 / HISTORY_REFINEMENT as f64);
        }
    }
    nodes.push(t);
    Ok(nodes)
}

/// `∫ cov(t − s) K(s) ds bᵀ`-style convolution on explicit nodes, returning
/// `Σ_k w_k cov(t − s_k) K(s_k)` (the caller multiplies by `b bᵀ`).
fn convolve_nodes<F>(cov: &dyn Fn(f64) -> f64, nodes: &[f64], t: f64, kernel_fn: F) -> DMatrix<f64>
where
    F: Fn(f64) -> DMatrix<f64>,
{
    let w = trapezoid_weights(nodes);
    let mut acc: Option<DMatrix<f64>> = None;
    for (k, &s) in nodes.iter().enumerate() {
        let c = w[k] * cov(t - s);
        if c == 0.0 {
            continue;
        }
        let term = kernel_fn(s) * c;
        acc = Some(match acc {
            Some(a) => a + term,
            None => term,
        });
    }
    acc.unwrap_or_else(|| {
        let n = kernel_fn(t).nrows();
        DMatrix::zeros(n, n)
    })
}

/// `∫_{t₀}^t C(t, s) K(s) b bᵀ ds` by composite trapezoid on the refined history
/// grid, truncated where the covariance envelope drops below `1e-8 C(0)`.
pub fn convolve_diffusion<F>(kernel_fn: F, spec: &ExcitationSpec, t: f64, history_grid: &[f64]) -> Result<DMatrix<f64>>
where
    F: Fn(f64) -> DMatrix<f64>,
{
    if spec.kernel.is_white() {
        return Err(Error::Unsupported(
            "white-noise kernels have no convolution form; use white_noise_coefficients".into(),
        ));
    }
    let horizon = spec.kernel.decay_horizon(DECAY_CUTOFF)?;
    let nodes = window_nodes(history_grid, spec.t0, t, horizon)?;
    let kernel = spec.kernel.clone();
    let sum = convolve_nodes(&|u| kernel.cov(u), &nodes, t, kernel_fn);
    Ok(outer_forcing(
        &(sum * DVector::from_column_slice(&spec.forcing)),
        &spec.forcing,
    ))
}

/// Same as [`convolve_diffusion`] with an arbitrary stationary covariance.
pub fn convolve_with_covariance<F>(
    cov: &dyn Fn(f64) -> f64,
    forcing: &[f64],
    t0: f64,
    t: f64,
    history_grid: &[f64],
    kernel_fn: F,
) -> Result<DMatrix<f64>>
where
    F: Fn(f64) -> DMatrix<f64>,
{
    let nodes = window_nodes(history_grid, t0, t, f64::INFINITY)?;
    let sum = convolve_nodes(cov, &nodes, t, kernel_fn);
    Ok(outer_forcing(&(sum * DVector::from_column_slice(forcing)), forcing))
}

fn outer_forcing(k: &DVector<f64>, forcing: &[f64]) -> DMatrix<f64> {
    let n = forcing.len();
    DMatrix::from_fn(n, n, |i, j| k[i] * forcing[j])
}

/// `(D₁₂, D₂₂)` of a damped linear oscillator from the closed-form transition
/// matrix, each integral by adaptive Simpson over the truncated lag window.
pub fn linear_exact_coefficients(zeta: f64, omega0: f64, spec: &ExcitationSpec, t: f64) -> Result<(f64, f64)> {
    if !(zeta < 1.0) {
        return Err(Error::Unsupported(format!(
            "linear oscillator with zeta = {zeta} (only underdamped systems)"
        )));
    }
    if spec.kernel.is_white() {
        return Err(Error::Unsupported(
            "linear-exact coefficients need a coloured kernel".into(),
        ));
    }
    let a = zeta * omega0;
    let g = omega0 * (1.0 - zeta * zeta).sqrt();
    let horizon = spec.kernel.decay_horizon(DECAY_CUTOFF)?;
    let span = (t - spec.t0).max(0.0).min(horizon);
    let kernel = &spec.kernel;
    let tol = 1e-13 * kernel.variance().max(1e-300);
    let d12 = adaptive_simpson(
        &|u: f64| kernel.cov(u) * (-a * u).exp() * (g * u).sin() / g,
        0.0,
        span,
        tol,
    );
    let d22 = adaptive_simpson(
        &|u: f64| kernel.cov(u) * (-a * u).exp() * ((g * u).cos() - a / g * (g * u).sin()),
        0.0,
        span,
        tol,
    );
    Ok((d12, d22))
}

/// Diffusion `D(t) b bᵀ` of the classical Fokker-Planck equation for a white
/// excitation of covariance `2D(t)δ(t − s)`: only half of the delta mass lies
/// inside `[t₀, t]`.
pub fn white_noise_coefficients(intensity: f64, forcing: &[f64]) -> DMatrix<f64> {
    let n = forcing.len();
    DMatrix::from_fn(n, n, |i, j| intensity * forcing[i] * forcing[j])
}

/// Closure flavour of the initial-state coupling term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossMode {
    Sct,
    Ngfpk,
}

/// `K(x, t, t₀) C_{X⁰Ξ}(t) bᵀ`.
pub fn x0xi_coefficient(
    model: &dyn SystemModel,
    spec: &ExcitationSpec,
    x: &[f64],
    t: f64,
    history: &MomentHistory,
    mode: CrossMode,
) -> Result<DMatrix<f64>> {
    let n = spec.dim();
    if !spec.has_cross_cov() {
        return Ok(DMatrix::zeros(n, n));
    }
    let c = DVector::from_vec(spec.cross_covariance(t));
    let k = match mode {
        CrossMode::Sct => sct_kernel(model, x, t, spec.t0),
        CrossMode::Ngfpk => ngfpk_kernel(model, x, t, spec.t0, history)?,
    };
    Ok(outer_forcing(&(k * c), &spec.forcing))
}

/// Evaluates the diffusion field of one [`Equation`] on a set of points,
/// keeping the composed `Φ[R](t; t₀)` needed by the initial-state coupling.
#[derive(Debug, Clone)]
pub struct DiffusionAssembler {
    equation: Equation,
    spec: ExcitationSpec,
    horizon: f64,
    /// `Φ[R](t_g; t₀)` composed step by step, with `t_g` its time.
    phi0: DMatrix<f64>,
    phi0_time: f64,
}

impl DiffusionAssembler {
    pub fn new(equation: Equation, model: &dyn SystemModel, spec: &ExcitationSpec) -> Result<Self> {
        spec.validate()?;
        if spec.dim() != model.dim() {
            return Err(Error::Parameter(format!(
                "excitation forcing has {} entries for a {}-state model",
                spec.dim(),
                model.dim()
            )));
        }
        if spec.kernel.is_white() && equation != Equation::Fpk {
            return Err(Error::Unsupported(format!(
                "white-noise excitation with the {equation} equation (use fpk)"
            )));
        }
        if equation == Equation::LinearExact && !model.is_linear() {
            return Err(Error::Unsupported(
                "linear_exact coefficients need a linear model".into(),
            ));
        }
        let horizon = if spec.kernel.is_white() {
            0.0
        } else {
            spec.kernel.decay_horizon(DECAY_CUTOFF)?
        };
        let n = model.dim();
        Ok(Self {
            equation,
            spec: spec.clone(),
            horizon,
            phi0: DMatrix::identity(n, n),
            phi0_time: spec.t0,
        })
    }

    pub fn equation(&self) -> Equation {
        self.equation
    }

    /// Truncation horizon of the history convolution.
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Advances `Φ[R](t; t₀)` to the last committed history time.
    pub fn commit(&mut self, history: &MomentHistory) -> Result<()> {
        if self.equation != Equation::Ngfpk || !self.spec.has_cross_cov() {
            return Ok(());
        }
        let t = match history.last_time() {
            Some(t) => t,
            None => return Ok(()),
        };
        if t > self.phi0_time {
            self.phi0 = self.phi_since_commit(t, history)? * &self.phi0;
            self.phi0_time = t;
        }
        Ok(())
    }

    fn phi_since_commit(&self, t: f64, history: &MomentHistory) -> Result<DMatrix<f64>> {
        if t <= self.phi0_time {
            let n = self.phi0.nrows();
            return Ok(DMatrix::identity(n, n));
        }
        let traj = history.trajectory(self.phi0_time, t)?;
        Ok(magnus(&traj, t, self.phi0_time, 2)?.value)
    }

    /// Diffusion field at time `t` on `points` (row-major, `dim` per point).
    /// `history_grid` holds every solver time up to `t`; `history` must end at
    /// `t` for the ngFPK equation.
    pub fn field(
        &self,
        model: &dyn SystemModel,
        t: f64,
        points: &[f64],
        history_grid: &[f64],
        history: &MomentHistory,
    ) -> Result<DiffusionField> {
        let n = model.dim();
        let n_nodes = points.len() / n;
        let b = DVector::from_column_slice(&self.spec.forcing);
        let cross = DVector::from_vec(self.spec.cross_covariance(t));
        let has_cross = self.spec.has_cross_cov();

        if let Kernel::WhiteNoise { intensity } = &self.spec.kernel {
            let d = white_noise_coefficients(intensity.eval(t), &self.spec.forcing);
            return Ok(DiffusionField::uniform(n_nodes, &d));
        }

        let cov = |u: f64| self.spec.kernel.cov(u);
        let nodes = window_nodes(history_grid, self.spec.t0, t, self.horizon)?;
        let weights: Vec<f64> = trapezoid_weights(&nodes)
            .iter()
            .zip(&nodes)
            .map(|(w, &s)| w * cov(t - s))
            .collect();
        let c0: f64 = weights.iter().sum();
        let c1: f64 = weights.iter().zip(&nodes).map(|(w, &s)| w * (t - s)).sum();
        let elapsed = t - self.spec.t0;

        let mut field = DiffusionField::zeros(n_nodes, n);
        match self.equation {
            Equation::Fpk => {
                let mut k = &b * c0;
                if has_cross {
                    k += &cross;
                }
                let d = outer_forcing(&k, &self.spec.forcing);
                return Ok(DiffusionField::uniform(n_nodes, &d));
            }
            Equation::LinearExact => {
                let j = model.jacobian(&points[..n], t);
                let mut k = DVector::zeros(n);
                for (w, &s) in weights.iter().zip(&nodes) {
                    if *w != 0.0 {
                        k += matrix_exp(&(&j * (t - s))) * &b * *w;
                    }
                }
                if has_cross {
                    k += matrix_exp(&(&j * elapsed)) * &cross;
                }
                let d = outer_forcing(&k, &self.spec.forcing);
                return Ok(DiffusionField::uniform(n_nodes, &d));
            }
            Equation::Sct => {
                let v0 = &b * c0;
                let v1 = &b * c1;
                let rows: Vec<DVector<f64>> = points
                    .par_chunks(n)
                    .map(|x| {
                        let j = model.jacobian(x, t);
                        let mut k = &v0 + &j * &v1;
                        if has_cross {
                            k += &cross + &j * &cross * elapsed;
                        }
                        k
                    })
                    .collect();
                fill(&mut field, &rows, &self.spec.forcing);
            }
            Equation::Ngfpk => {
                let traj = history.trajectory(nodes[0], t)?;
                let r_t = traj.at(t);
                let mats: Vec<DMatrix<f64>> = nodes.iter().map(|&s| traj.at(s)).collect();
                let phis = magnus2_to_end(&nodes, &mats);
                // v0 = Σ w Φ b, v1 = Σ w τ Φ b, enough when Δ² = 0
                let mut v0 = DVector::zeros(n);
                let mut v1 = DVector::zeros(n);
                for ((w, &s), phi) in weights.iter().zip(&nodes).zip(&phis) {
                    let pb = phi * &b;
                    v0 += &pb * *w;
                    v1 += &pb * (*w * (t - s));
                }
                let phi_t0 = if has_cross {
                    self.phi_since_commit(t, history)? * &self.phi0 * &cross
                } else {
                    DVector::zeros(n)
                };
                let rows: Vec<DVector<f64>> = points
                    .par_chunks(n)
                    .map(|x| {
                        let delta = model.jacobian(x, t) - &r_t;
                        let scale = delta.amax();
                        let nilpotent = scale == 0.0 || (&delta * &delta).amax() <= 1e-14 * scale * scale;
                        let mut k = if nilpotent {
                            &v0 + &delta * &v1
                        } else {
                            let mut k = DVector::zeros(n);
                            for ((w, &s), phi) in weights.iter().zip(&nodes).zip(&phis) {
                                if *w != 0.0 {
                                    k += small_exp(&(&delta * (t - s))) * phi * &b * *w;
                                }
                            }
                            k
                        };
                        if has_cross {
                            k += small_exp(&(&delta * elapsed)) * &phi_t0;
                        }
                        k
                    })
                    .collect();
                fill(&mut field, &rows, &self.spec.forcing);
            }
        }
        Ok(field)
    }
}

fn small_exp(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 2 {
        DMatrix::from_row_slice(2, 2, &exp2(m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]))
    } else {
        matrix_exp(m)
    }
}

fn fill(field: &mut DiffusionField, rows: &[DVector<f64>], forcing: &[f64]) {
    for (node, k) in rows.iter().enumerate() {
        for i in 0..forcing.len() {
            for (j, bj) in forcing.iter().enumerate() {
                field.set(node, i, j, k[i] * bj);
            }
        }
    }
}

/// `(D₁₂, D₂₂)` for a [`LinearOscillator`] model.
pub fn linear_oscillator_coefficients(osc: &LinearOscillator, spec: &ExcitationSpec, t: f64) -> Result<(f64, f64)> {
    linear_exact_coefficients(osc.zeta, osc.omega0, spec, t)
}
