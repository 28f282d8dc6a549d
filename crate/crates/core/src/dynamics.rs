//! Dynamical systems driven by the excitation: drift, Jacobian and the moment
//! functionals that determine the mean Jacobian `R(t) = E[J^h(X(t), t)]`.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Monomial functional `x₁^{e₁} ⋯ x_N^{e_N}` of the state.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Monomial {
    pub exponents: Vec<u32>,
}

impl Monomial {
    pub fn new(exponents: Vec<u32>) -> Self {
        Self { exponents }
    }

    /// `x_{axis}^{power}` in an `n`-dimensional state.
    pub fn axis_power(n: usize, axis: usize, power: u32) -> Self {
        let mut exponents = vec![0; n];
        exponents[axis] = power;
        Self { exponents }
    }

    pub fn one(n: usize) -> Self {
        Self { exponents: vec![0; n] }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.exponents
            .iter()
            .zip(x)
            .map(|(&e, &xi)| xi.powi(e as i32))
            .product()
    }
}

impl fmt::Display for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .exponents
            .iter()
            .enumerate()
            .filter(|(_, &e)| e > 0)
            .map(|(i, &e)| {
                if e == 1 {
                    format!("x{}", i + 1)
                } else {
                    format!("x{}^{}", i + 1, e)
                }
            })
            .collect();
        if parts.is_empty() {
            write!(f, "1")
        } else {
            write!(f, "{}", parts.join("*"))
        }
    }
}

/// Drift `h(x, t)` of `Ẋ = h(X, t) + Ξ(t)` together with its Jacobian.
pub trait SystemModel: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    fn drift(&self, x: &[f64], t: f64, out: &mut [f64]);

    fn jacobian(&self, x: &[f64], t: f64) -> DMatrix<f64>;

    /// Moment functionals whose expectations fully determine `R(t)`.
    /// `None` means `R` must be obtained by quadrature of `J^h` against the density.
    fn moment_basis(&self) -> Option<Vec<Monomial>>;

    /// `R(t)` from the expectations of [`SystemModel::moment_basis`], in order.
    fn mean_jacobian(&self, moments: &[f64], t: f64) -> Result<DMatrix<f64>> {
        let _ = (moments, t);
        Err(Error::Unsupported(format!(
            "{self:?} has no moment representation of its mean Jacobian"
        )))
    }

    /// True when the Jacobian does not depend on the state.
    fn is_linear(&self) -> bool {
        false
    }
}

fn missing(basis: &[Monomial], moments: &[f64]) -> Result<()> {
    if moments.len() < basis.len() {
        return Err(Error::MissingMoment(basis[moments.len()].to_string()));
    }
    Ok(())
}

/// Nondimensional bistable Duffing oscillator `ẍ + 2ζẋ − x + x³ = Ξ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Duffing {
    pub zeta: f64,
}

impl Duffing {
    pub fn new(zeta: f64) -> Result<Self> {
        if !(zeta > 0.0) {
            return Err(Error::Parameter(format!("damping ratio {zeta} must be positive")));
        }
        Ok(Self { zeta })
    }
}

impl SystemModel for Duffing {
    fn dim(&self) -> usize {
        2
    }

    fn drift(&self, x: &[f64], _t: f64, out: &mut [f64]) {
        out[0] = x[1];
        out[1] = -x[0] * x[0] * x[0] + x[0] - 2.0 * self.zeta * x[1];
    }

    fn jacobian(&self, x: &[f64], _t: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0 - 3.0 * x[0] * x[0], -2.0 * self.zeta])
    }

    fn moment_basis(&self) -> Option<Vec<Monomial>> {
        Some(vec![Monomial::axis_power(2, 0, 2)])
    }

    fn mean_jacobian(&self, moments: &[f64], _t: f64) -> Result<DMatrix<f64>> {
        let basis = self.moment_basis().unwrap_or_default();
        missing(&basis, moments)?;
        Ok(DMatrix::from_row_slice(
            2,
            2,
            &[0.0, 1.0, 1.0 - 3.0 * moments[0], -2.0 * self.zeta],
        ))
    }
}

/// Damped linear oscillator `ẍ + 2ζω₀ẋ + ω₀²x = Ξ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearOscillator {
    pub zeta: f64,
    pub omega0: f64,
}

impl LinearOscillator {
    pub fn new(zeta: f64, omega0: f64) -> Result<Self> {
        if !(zeta > 0.0 && zeta < 1.0) {
            return Err(Error::Parameter(format!(
                "damping ratio {zeta} outside the underdamped range (0, 1)"
            )));
        }
        if !(omega0 > 0.0) {
            return Err(Error::Parameter(format!("natural frequency {omega0} must be positive")));
        }
        Ok(Self { zeta, omega0 })
    }

    pub fn system_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(
            2,
            2,
            &[0.0, 1.0, -self.omega0 * self.omega0, -2.0 * self.zeta * self.omega0],
        )
    }

    /// Decay rate `ζω₀` of the free response.
    pub fn decay_rate(&self) -> f64 {
        self.zeta * self.omega0
    }

    /// Damped frequency `ω₀√(1-ζ²)`.
    pub fn damped_freq(&self) -> f64 {
        self.omega0 * (1.0 - self.zeta * self.zeta).sqrt()
    }
}

impl SystemModel for LinearOscillator {
    fn dim(&self) -> usize {
        2
    }

    fn drift(&self, x: &[f64], _t: f64, out: &mut [f64]) {
        out[0] = x[1];
        out[1] = -self.omega0 * self.omega0 * x[0] - 2.0 * self.zeta * self.omega0 * x[1];
    }

    fn jacobian(&self, _x: &[f64], _t: f64) -> DMatrix<f64> {
        self.system_matrix()
    }

    fn moment_basis(&self) -> Option<Vec<Monomial>> {
        Some(Vec::new())
    }

    fn mean_jacobian(&self, _moments: &[f64], _t: f64) -> Result<DMatrix<f64>> {
        Ok(self.system_matrix())
    }

    fn is_linear(&self) -> bool {
        true
    }
}

pub fn duffing_model(zeta: f64) -> Result<Duffing> {
    Duffing::new(zeta)
}

pub fn linear_oscillator_model(zeta: f64, omega0: f64) -> Result<LinearOscillator> {
    LinearOscillator::new(zeta, omega0)
}

/// `R = E[J^h]` from moment values ordered like `model.moment_basis()`.
pub fn mean_jacobian(model: &dyn SystemModel, moments: &[f64], t: f64) -> Result<DMatrix<f64>> {
    model.mean_jacobian(moments, t)
}

/// Dimensional Duffing parameters `m ẍ + b ẋ + η₁ x + η₃ x³ = ξ₀ Ξ₀ + m_Ξ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DuffingParams {
    pub mass: f64,
    pub damping: f64,
    pub eta1: f64,
    pub eta3: f64,
    pub xi0: f64,
}

/// Nondimensional parameters and the scales that produced them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NondimDuffing {
    pub zeta: f64,
    /// Dimensionless forcing coefficient `ξ₀ √(η₃ / |η₁|³)`.
    pub forcing: f64,
    /// `t̃ = t * time_scale`
    pub time_scale: f64,
    /// `x̃ = x * state_scale`
    pub state_scale: f64,
}

pub fn nondimensionalize_duffing(p: &DuffingParams) -> Result<NondimDuffing> {
    if !(p.mass > 0.0 && p.damping > 0.0) {
        return Err(Error::Parameter("mass and damping must be positive".into()));
    }
    if !(p.eta1 < 0.0) {
        return Err(Error::Parameter(format!(
            "linear stiffness {} must be negative for a bistable oscillator",
            p.eta1
        )));
    }
    if !(p.eta3 > 0.0) {
        return Err(Error::Parameter(format!("cubic stiffness {} must be positive", p.eta3)));
    }
    if !(p.xi0 >= 0.0) {
        return Err(Error::Parameter(format!(
            "forcing amplitude {} must be non-negative",
            p.xi0
        )));
    }
    let k = p.eta1.abs();
    Ok(NondimDuffing {
        zeta: p.damping / (2.0 * (p.mass * k).sqrt()),
        forcing: p.xi0 * (p.eta3 / k.powi(3)).sqrt(),
        time_scale: (k / p.mass).sqrt(),
        state_scale: (p.eta3 / k).sqrt(),
    })
}
