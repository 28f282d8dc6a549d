//! Closed-form reference solutions: the Gaussian response of a damped linear
//! oscillator under Gaussian excitation and the stationary density of the
//! white-noise Duffing oscillator.

use nalgebra::{DMatrix, DVector, Matrix2, SymmetricEigen, Vector2};

use crate::dynamics::LinearOscillator;
use crate::error::{Error, Result};
use crate::excitation::{CrossCovariance, ExcitationSpec, GaussianLaw, DECAY_CUTOFF};
use crate::grid::{GridSpec, PdfField};
use crate::quadrature::simpson_weights;

/// Largest quadrature step of the Gaussian-solution integrals.
const MAX_STEP: f64 = 1e-2;

/// Closed-form transition matrix `exp(J u)` of the damped oscillator.
pub fn oscillator_transition(osc: &LinearOscillator, u: f64) -> Matrix2<f64> {
    let a = osc.zeta * osc.omega0;
    let g = osc.omega0 * (1.0 - osc.zeta * osc.zeta).sqrt();
    let w2 = osc.omega0 * osc.omega0;
    let e = (-a * u).exp();
    let (c, s) = ((g * u).cos(), (g * u).sin());
    Matrix2::new(e * (c + a / g * s), e * s / g, -e * w2 * s / g, e * (c - a / g * s))
}

/// Mean and covariance of the state at time `t` for a damped oscillator
/// started from `initial` at `spec.t0`.
///
/// With `u = t − s` and `Φ(u) = exp(J u)`:
/// `m = Φ(T) m⁰ + ∫₀^T Φ(u) b m_Ξ(t − u) du` and the excitation part of the
/// covariance `∫∫ Φ(u) b bᵀ Φ(v)ᵀ C(u − v)` is integrated as
/// `∫₀^T [Φ(T') b q(T')ᵀ + q(T') bᵀ Φ(T')ᵀ] dT'`, `q(T') = ∫₀^{T'} C(T' − v) Φ(v) b dv`
/// (differentiating the square domain in its side), with composite Simpson
/// for both levels.
pub fn linear_gaussian_solution(
    osc: &LinearOscillator,
    spec: &ExcitationSpec,
    initial: &GaussianLaw,
    t: f64,
) -> Result<(Vector2<f64>, Matrix2<f64>)> {
    if !(osc.zeta < 1.0) {
        return Err(Error::Unsupported(format!(
            "linear oscillator with zeta = {} (only underdamped systems)",
            osc.zeta
        )));
    }
    if spec.kernel.is_white() {
        return Err(Error::Unsupported(
            "the Gaussian solution needs a coloured kernel".into(),
        ));
    }
    if spec.dim() != 2 || initial.dim() != 2 {
        return Err(Error::Parameter("oscillator solutions are two-dimensional".into()));
    }
    let big_t = t - spec.t0;
    if big_t < 0.0 {
        return Err(Error::Domain {
            t,
            lo: spec.t0,
            hi: f64::INFINITY,
        });
    }
    let m0 = Vector2::new(initial.mean[0], initial.mean[1]);
    let c0 = Matrix2::new(
        initial.cov[(0, 0)],
        initial.cov[(0, 1)],
        initial.cov[(1, 0)],
        initial.cov[(1, 1)],
    );
    if big_t == 0.0 {
        return Ok((m0, c0));
    }
    let b = Vector2::new(spec.forcing[0], spec.forcing[1]);
    let n = {
        let k = (big_t / MAX_STEP).ceil() as usize;
        (k + k % 2).max(2)
    };
    let h = big_t / n as f64;
    let phi_b: Vec<Vector2<f64>> = (0..=n).map(|k| oscillator_transition(osc, k as f64 * h) * b).collect();
    let phi_t = oscillator_transition(osc, big_t);

    let w = simpson_weights(n, h);
    let mut mean = phi_t * m0;
    for k in 0..=n {
        mean += phi_b[k] * (w[k] * spec.mean_at(t - k as f64 * h));
    }

    let horizon = spec.kernel.decay_horizon(DECAY_CUTOFF)?;
    let max_lag = ((horizon / h).ceil() as usize).min(n);
    let cov_lag: Vec<f64> = (0..=n)
        .map(|k| {
            if k <= max_lag {
                spec.kernel.cov(k as f64 * h)
            } else {
                0.0
            }
        })
        .collect();
    // q(T'_k) for every grid point
    let q: Vec<Vector2<f64>> = (0..=n)
        .map(|k| {
            let wk = simpson_weights(k, h);
            let lo = k.saturating_sub(max_lag);
            let mut acc = Vector2::zeros();
            for j in lo..=k {
                acc += phi_b[j] * (wk[j] * cov_lag[k - j]);
            }
            acc
        })
        .collect();
    let mut cov = phi_t * c0 * phi_t.transpose();
    for k in 0..=n {
        let term = phi_b[k] * q[k].transpose();
        cov += (term + term.transpose()) * w[k];
    }
    if let CrossCovariance::KernelScaled { weights } = &spec.cross_cov {
        let sigma = spec.kernel.variance().sqrt();
        if sigma > 0.0 {
            // E[X⁰ ξ(s)] = w C(s − t₀)/σ, so E[X⁰ (∫Φ b ξ)ᵀ] = w q(T)ᵀ / σ
            let wv = Vector2::new(weights[0], weights[1]);
            let p = wv * q[n].transpose() / sigma;
            let cross = phi_t * p;
            cov += cross + cross.transpose();
        }
    }
    Ok((mean, psd_floor(cov)))
}

/// Symmetrises and floors negative eigenvalues at zero.
fn psd_floor(c: Matrix2<f64>) -> Matrix2<f64> {
    let s = (c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(s);
    if eig.eigenvalues.iter().all(|&v| v >= 0.0) {
        return s;
    }
    let d = Matrix2::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0)));
    eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Gaussian density with the given moments on a grid (unit continuous mass,
/// not renormalised on the grid).
pub fn gaussian_density(grid: &GridSpec, mean: &Vector2<f64>, cov: &Matrix2<f64>, t: f64) -> Result<PdfField> {
    let inv = cov
        .try_inverse()
        .ok_or_else(|| Error::Parameter("singular covariance".into()))?;
    let det = cov.determinant();
    if !(det > 0.0) {
        return Err(Error::Parameter("covariance is not positive definite".into()));
    }
    let norm = 1.0 / (2.0 * std::f64::consts::PI * det.sqrt());
    Ok(PdfField::from_fn(grid, t, |a, b| {
        let d = Vector2::new(a - mean[0], b - mean[1]);
        norm * (-0.5 * (d.transpose() * inv * d)[(0, 0)]).exp()
    }))
}

/// Solves `A X + X Aᵀ + Q = 0`.
pub fn lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let k = id.kronecker(a) + a.kronecker(&id);
    let rhs = -DVector::from_column_slice(q.as_slice());
    let x = k
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Parameter("Lyapunov operator is singular".into()))?;
    Ok(DMatrix::from_column_slice(n, n, x.as_slice()))
}

/// Unnormalised stationary Duffing density `exp(−(2ζ/D)(x₂²/2 + x₁⁴/4 − x₁²/2))`.
fn duffing_weight(zeta: f64, d: f64, x1: f64, x2: f64) -> f64 {
    let beta = 2.0 * zeta / d;
    (-beta * (0.5 * x2 * x2 + 0.25 * x1.powi(4) - 0.5 * x1 * x1)).exp()
}

/// Largest pointwise residual of the stationary Fokker-Planck equation
/// `−∂₁(x₂ f) − ∂₂(h₂ f) + D ∂₂₂ f` at the grid nodes for the candidate
/// `f ∝ exp(−β H)`, `H = x₂²/2 + x₁⁴/4 − x₁²/2`, with exact derivatives.
/// `field` holds the normalised candidate values.
pub fn duffing_stationary_residual(zeta: f64, d: f64, beta: f64, field: &PdfField) -> f64 {
    let grid = &field.grid;
    (0..grid.len())
        .map(|k| {
            let [x1, x2] = grid.point(k);
            let f = field.values[k];
            let h2 = -x1.powi(3) + x1 - 2.0 * zeta * x2;
            let df1 = -beta * (x1.powi(3) - x1) * f;
            let df2 = -beta * x2 * f;
            let d2f2 = (beta * beta * x2 * x2 - beta) * f;
            let adv1 = x2 * df1;
            let adv2 = -2.0 * zeta * f + h2 * df2;
            (-adv1 - adv2 + d * d2f2).abs()
        })
        .fold(0.0, f64::max)
}

/// Stationary density of the Duffing oscillator under white noise of
/// intensity `D`, normalised on `grid`. The candidate is checked against the
/// stationary equation before it is returned.
pub fn duffing_white_noise_stationary(zeta: f64, d: f64, grid: &GridSpec) -> Result<PdfField> {
    if !(zeta > 0.0 && d > 0.0) {
        return Err(Error::Parameter(format!(
            "stationary density needs zeta > 0 and D > 0 (got {zeta}, {d})"
        )));
    }
    let mut f = PdfField::from_fn(grid, f64::INFINITY, |a, b| duffing_weight(zeta, d, a, b));
    f.normalize();
    let residual = duffing_stationary_residual(zeta, d, 2.0 * zeta / d, &f);
    if residual > 1e-8 {
        return Err(Error::Parameter(format!(
            "stationary candidate fails the residual check ({residual:e})"
        )));
    }
    Ok(f)
}
