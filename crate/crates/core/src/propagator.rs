//! State-transition matrices `Φ[A](t; s)` of `Ẏ = A(u) Y`, `Y(s) = I`.
//!
//! `A` is given as a sampled [`MatrixTrajectory`] with piecewise-linear
//! interpolation. Truncated Peano-Baker and Magnus series use composite
//! trapezoid quadrature on a refinement of the trajectory grid; the
//! fourth-order Runge-Kutta solver serves as reference.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum number of quadrature subintervals over `[s, t]`.
const MIN_SUBINTERVALS: usize = 64;
/// Quadrature subintervals per trajectory interval.
const REFINEMENT: usize = 4;

/// Samples of a matrix-valued function of time.
#[derive(Debug, Clone)]
pub struct MatrixTrajectory {
    times: Vec<f64>,
    matrices: Vec<DMatrix<f64>>,
}

impl MatrixTrajectory {
    pub fn new(times: Vec<f64>, matrices: Vec<DMatrix<f64>>) -> Result<Self> {
        if times.len() != matrices.len() || times.is_empty() {
            return Err(Error::Parameter(
                "trajectory needs one matrix per time and at least one sample".into(),
            ));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Parameter("trajectory times must be strictly increasing".into()));
        }
        let n = matrices[0].nrows();
        for m in &matrices {
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::Parameter("trajectory matrices must be N×N".into()));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parameter("trajectory has non-finite entries".into()));
            }
        }
        Ok(Self { times, matrices })
    }

    /// Constant matrix on `[lo, hi]`.
    pub fn constant(a: DMatrix<f64>, lo: f64, hi: f64) -> Self {
        Self {
            times: vec![lo, hi],
            matrices: vec![a.clone(), a],
        }
    }

    /// Samples `f` on a uniform grid of `n + 1` points over `[lo, hi]`.
    pub fn sample<F: Fn(f64) -> DMatrix<f64>>(f: F, lo: f64, hi: f64, n: usize) -> Self {
        let times: Vec<f64> = (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect();
        let matrices = times.iter().map(|&t| f(t)).collect();
        Self { times, matrices }
    }

    pub fn dim(&self) -> usize {
        self.matrices[0].nrows()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    fn check(&self, t: f64) -> Result<()> {
        let slack = 1e-12 * (1.0 + self.end().abs());
        if t < self.start() - slack || t > self.end() + slack {
            return Err(Error::Domain {
                t,
                lo: self.start(),
                hi: self.end(),
            });
        }
        Ok(())
    }

    /// Linear interpolation (clamped to the sampled range).
    pub fn at(&self, t: f64) -> DMatrix<f64> {
        let n = self.times.len();
        if n == 1 || t <= self.times[0] {
            return self.matrices[0].clone();
        }
        if t >= self.times[n - 1] {
            return self.matrices[n - 1].clone();
        }
        let k = self.times.partition_point(|&x| x <= t) - 1;
        let (t0, t1) = (self.times[k], self.times[k + 1]);
        let w = (t - t0) / (t1 - t0);
        &self.matrices[k] * (1.0 - w) + &self.matrices[k + 1] * w
    }

    /// Quadrature nodes on `[s, t]`: every trajectory node inside plus a
    /// uniform refinement, with at least `MIN_SUBINTERVALS` subintervals.
    fn nodes(&self, s: f64, t: f64) -> Vec<f64> {
        let inside = self.times.iter().filter(|&&x| x > s && x < t).count();
        let n = MIN_SUBINTERVALS.max(REFINEMENT * (inside + 1));
        (0..=n).map(|i| s + (t - s) * i as f64 / n as f64).collect()
    }
}

/// Series or solver used to produce a [`TransitionMatrix`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", content = "terms", rename_all = "snake_case")]
pub enum Method {
    Peano(usize),
    Magnus(usize),
    Rk4,
    ClosedForm,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Peano(_) => write!(f, "peano"),
            Method::Magnus(_) => write!(f, "magnus"),
            Method::Rk4 => write!(f, "rk4"),
            Method::ClosedForm => write!(f, "closed_form"),
        }
    }
}

/// `Φ(t; s)` with provenance.
#[derive(Debug, Clone)]
pub struct TransitionMatrix {
    pub value: DMatrix<f64>,
    pub method: Method,
    pub interval: (f64, f64),
}

fn commutator(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a * b - b * a
}

/// Truncated Peano-Baker series `I + Σ_{k≤n} ∫ A ∫ A ⋯`.
pub fn peano_baker(a: &MatrixTrajectory, t: f64, s: f64, n_terms: usize) -> Result<TransitionMatrix> {
    a.check(s)?;
    a.check(t)?;
    if s > t {
        return Err(Error::Parameter(format!("peano_baker needs s <= t, got s={s}, t={t}")));
    }
    if n_terms > 4 {
        return Err(Error::Unsupported(format!("{n_terms} Peano-Baker terms (max 4)")));
    }
    let n = a.dim();
    let id = DMatrix::identity(n, n);
    if s == t {
        return Ok(TransitionMatrix {
            value: id,
            method: Method::Peano(n_terms),
            interval: (s, t),
        });
    }
    let nodes = a.nodes(s, t);
    let mats: Vec<DMatrix<f64>> = nodes.iter().map(|&u| a.at(u)).collect();
    let mut level: Vec<DMatrix<f64>> = vec![id.clone(); nodes.len()];
    let mut total = id;
    for _ in 0..n_terms {
        let mut next = Vec::with_capacity(nodes.len());
        let mut acc = DMatrix::zeros(n, n);
        next.push(acc.clone());
        for j in 1..nodes.len() {
            let h = nodes[j] - nodes[j - 1];
            acc += (&mats[j - 1] * &level[j - 1] + &mats[j] * &level[j]) * (0.5 * h);
            next.push(acc.clone());
        }
        total += &acc;
        level = next;
    }
    Ok(TransitionMatrix {
        value: total,
        method: Method::Peano(n_terms),
        interval: (s, t),
    })
}

/// Magnus terms `Ω₁..Ω_n` on explicit quadrature nodes.
fn magnus_omega(nodes: &[f64], mats: &[DMatrix<f64>], n_terms: usize) -> DMatrix<f64> {
    let n = mats[0].nrows();
    let m = nodes.len();
    // P(u) = ∫_s^u A, cumulative trapezoid
    let mut p = vec![DMatrix::zeros(n, n); m];
    for j in 1..m {
        let h = nodes[j] - nodes[j - 1];
        p[j] = &p[j - 1] + (&mats[j - 1] + &mats[j]) * (0.5 * h);
    }
    let mut omega = p[m - 1].clone();
    if n_terms < 2 {
        return omega;
    }
    // Ω₂ = ½ ∫ [A(u₁), P(u₁)] du₁
    let inner2: Vec<DMatrix<f64>> = (0..m).map(|j| commutator(&mats[j], &p[j])).collect();
    let mut q = vec![DMatrix::zeros(n, n); m];
    for j in 1..m {
        let h = nodes[j] - nodes[j - 1];
        q[j] = &q[j - 1] + (&inner2[j - 1] + &inner2[j]) * (0.5 * h);
    }
    omega += &q[m - 1] * 0.5;
    if n_terms < 3 {
        return omega;
    }
    // Ω₃ = ⅙ ∫∫∫ [A₁,[A₂,A₃]] + [A₃,[A₂,A₁]] over u₃ < u₂ < u₁.
    // First part: ∫ [A₁, Q(u₁)] du₁.
    // Second part: ∫_s^{u₁} [P₂,[A₂,A₁]] du₂ expands to
    //   U(u₁)A₁ − K₁(u₁)·A₁ − K₂(u₁)·A₁ + A₁V(u₁)
    // with U = ∫P₂A₂, V = ∫A₂P₂ and K₁, K₂ the Kronecker accumulations of
    // A ↦ P₂ A A₂ and A ↦ A₂ A P₂ (vec(XAY) = (Yᵀ ⊗ X) vec(A)).
    let mut u_acc = DMatrix::zeros(n, n);
    let mut v_acc = DMatrix::zeros(n, n);
    let mut k1 = DMatrix::zeros(n * n, n * n);
    let mut k2 = DMatrix::zeros(n * n, n * n);
    let pa: Vec<DMatrix<f64>> = (0..m).map(|j| &p[j] * &mats[j]).collect();
    let ap: Vec<DMatrix<f64>> = (0..m).map(|j| &mats[j] * &p[j]).collect();
    let kr1: Vec<DMatrix<f64>> = (0..m).map(|j| mats[j].transpose().kronecker(&p[j])).collect();
    let kr2: Vec<DMatrix<f64>> = (0..m).map(|j| p[j].transpose().kronecker(&mats[j])).collect();
    let mut outer = vec![DMatrix::zeros(n, n); m];
    for j in 0..m {
        if j > 0 {
            let h = 0.5 * (nodes[j] - nodes[j - 1]);
            u_acc += (&pa[j - 1] + &pa[j]) * h;
            v_acc += (&ap[j - 1] + &ap[j]) * h;
            k1 += (&kr1[j - 1] + &kr1[j]) * h;
            k2 += (&kr2[j - 1] + &kr2[j]) * h;
        }
        let a1 = &mats[j];
        let vec_a1 = DMatrix::from_column_slice(n * n, 1, a1.as_slice());
        let s1 = &k1 * &vec_a1;
        let s2 = &k2 * &vec_a1;
        let mid1 = DMatrix::from_column_slice(n, n, s1.as_slice());
        let mid2 = DMatrix::from_column_slice(n, n, s2.as_slice());
        let second = &u_acc * a1 - mid1 - mid2 + a1 * &v_acc;
        outer[j] = commutator(a1, &q[j]) + second;
    }
    let mut omega3 = DMatrix::zeros(n, n);
    for j in 1..m {
        let h = nodes[j] - nodes[j - 1];
        omega3 += (&outer[j - 1] + &outer[j]) * (0.5 * h);
    }
    omega + omega3 / 6.0
}

/// `exp(Ω₁ + … + Ω_n)` for `n ∈ {1, 2, 3}`.
pub fn magnus(a: &MatrixTrajectory, t: f64, s: f64, n_terms: usize) -> Result<TransitionMatrix> {
    if !(1..=3).contains(&n_terms) {
        return Err(Error::Unsupported(format!(
            "Magnus expansion with {n_terms} terms (only 1 to 3 are available)"
        )));
    }
    a.check(s)?;
    a.check(t)?;
    if s > t {
        return Err(Error::Parameter(format!("magnus needs s <= t, got s={s}, t={t}")));
    }
    let n = a.dim();
    if s == t {
        return Ok(TransitionMatrix {
            value: DMatrix::identity(n, n),
            method: Method::Magnus(n_terms),
            interval: (s, t),
        });
    }
    let nodes = a.nodes(s, t);
    let mats: Vec<DMatrix<f64>> = nodes.iter().map(|&u| a.at(u)).collect();
    let omega = magnus_omega(&nodes, &mats, n_terms);
    Ok(TransitionMatrix {
        value: matrix_exp(&omega),
        method: Method::Magnus(n_terms),
        interval: (s, t),
    })
}

/// Two-term Magnus transition matrices `Φ(u_last; u_k)` for every node `u_k`
/// of one quadrature grid, in `O(len)` total.
///
/// Uses `Ω₁(t;s) = F(t) − F(s)` and
/// `Ω₂(t;s) = ½ (G(t) − G(s) − [Ω₁(t;s), F(s)])`, where `F` is the cumulative
/// trapezoid of `A` and `G` that of `[A, F]`; this is the nested trapezoid on
/// the same nodes.
pub fn magnus2_to_end(nodes: &[f64], mats: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    let m = nodes.len();
    assert_eq!(m, mats.len());
    if m == 0 {
        return Vec::new();
    }
    let n = mats[0].nrows();
    let mut f = vec![DMatrix::zeros(n, n); m];
    let mut g = vec![DMatrix::zeros(n, n); m];
    let mut prev_c = DMatrix::zeros(n, n);
    for j in 1..m {
        let h = nodes[j] - nodes[j - 1];
        f[j] = &f[j - 1] + (&mats[j - 1] + &mats[j]) * (0.5 * h);
        let c = commutator(&mats[j], &f[j]);
        g[j] = &g[j - 1] + (&prev_c + &c) * (0.5 * h);
        prev_c = c;
    }
    let (f_end, g_end) = (&f[m - 1], &g[m - 1]);
    (0..m)
        .map(|k| {
            let om1 = f_end - &f[k];
            let om2 = (g_end - &g[k] - commutator(&om1, &f[k])) * 0.5;
            matrix_exp(&(om1 + om2))
        })
        .collect()
}

/// Matrix exponential. 2×2 inputs use the closed form; larger matrices use
/// nalgebra's scaling-and-squaring Padé approximant.
pub fn matrix_exp(m: &DMatrix<f64>) -> DMatrix<f64> {
    assert!(m.is_square(), "matrix_exp needs a square matrix");
    match m.nrows() {
        0 => m.clone(),
        1 => DMatrix::from_element(1, 1, m[(0, 0)].exp()),
        2 => {
            let e = exp2(m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
            DMatrix::from_row_slice(2, 2, &e)
        }
        _ => m.clone().exp(),
    }
}

/// Closed-form `exp([[a, b], [c, d]])`, row-major.
///
/// With `τ = (a + d)/2` and `N = M − τI`, `N² = δI` where `δ = ((a−d)/2)² + bc`,
/// so `exp(M) = e^τ (C(δ) I + S(δ) N)` with `C = cosh √δ`, `S = sinh √δ / √δ`
/// (trigonometric for `δ < 0`).
pub fn exp2(a: f64, b: f64, c: f64, d: f64) -> [f64; 4] {
    let tau = 0.5 * (a + d);
    let half = 0.5 * (a - d);
    let delta = half * half + b * c;
    let (ch, sh) = if delta.abs() < 1e-8 {
        // series to second order in δ
        (
            1.0 + delta / 2.0 + delta * delta / 24.0,
            1.0 + delta / 6.0 + delta * delta / 120.0,
        )
    } else if delta > 0.0 {
        let q = delta.sqrt();
        (q.cosh(), q.sinh() / q)
    } else {
        let q = (-delta).sqrt();
        (q.cos(), q.sin() / q)
    };
    let et = tau.exp();
    [et * (ch + sh * half), et * sh * b, et * sh * c, et * (ch - sh * half)]
}

/// Classical RK4 on `Ẏ = A(u) Y`, `Y(s) = I`, with `steps` uniform substeps.
pub fn rk4_transition(a: &MatrixTrajectory, t: f64, s: f64, steps: usize) -> Result<TransitionMatrix> {
    a.check(s)?;
    a.check(t)?;
    let n = a.dim();
    let steps = steps.max(1);
    let mut y = DMatrix::identity(n, n);
    if t != s {
        let h = (t - s) / steps as f64;
        for k in 0..steps {
            let u = s + k as f64 * h;
            let a0 = a.at(u);
            let am = a.at(u + 0.5 * h);
            let a1 = a.at(u + h);
            let k1 = &a0 * &y;
            let k2 = &am * (&y + &k1 * (0.5 * h));
            let k3 = &am * (&y + &k2 * (0.5 * h));
            let k4 = &a1 * (&y + &k3 * h);
            y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
    }
    Ok(TransitionMatrix {
        value: y,
        method: Method::Rk4,
        interval: (s, t),
    })
}
