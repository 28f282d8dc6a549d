//! Gaussian excitation laws: mean functions, stationary covariance kernels,
//! correlation times, shape calibration and exact path sampling.
//!
//! An excitation is a scalar Gaussian process `m(t) + ξ(t)` applied to the
//! state equations through a fixed weight vector (`forcing`). For the
//! oscillators in this crate only the velocity equation is forced, so the
//! weights are `(0, 1)`.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::adaptive_simpson;

/// Relative level below which the covariance is treated as zero.
pub const DECAY_CUTOFF: f64 = 1e-8;
/// Diagonal jitter, relative to the variance, tried before declaring a covariance non-PSD.
pub const PSD_JITTER: f64 = 1e-12;

/// Deterministic scalar function of time (excitation mean, white-noise intensity).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TimeFunction {
    #[default]
    Zero,
    Constant {
        value: f64,
    },
    /// `amplitude * e^{rate (t - midpoint)} / (1 + e^{rate (t - midpoint)})`
    Logistic {
        amplitude: f64,
        rate: f64,
        midpoint: f64,
    },
}

impl TimeFunction {
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            TimeFunction::Zero => 0.0,
            TimeFunction::Constant { value } => value,
            TimeFunction::Logistic {
                amplitude,
                rate,
                midpoint,
            } => {
                let z = rate * (t - midpoint);
                // e^z / (1 + e^z) without overflow for large |z|
                if z >= 0.0 {
                    amplitude / (1.0 + (-z).exp())
                } else {
                    let e = z.exp();
                    amplitude * e / (1.0 + e)
                }
            }
        }
    }
}

/// Covariance kernel of the fluctuating part of the excitation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kernel", rename_all = "snake_case")]
pub enum Kernel {
    /// `variance * exp(-shape² u²) * cos(peak_freq * u)`
    GaussianFilter { variance: f64, shape: f64, peak_freq: f64 },
    /// `variance * exp(-|u| / timescale)`
    OrnsteinUhlenbeck { variance: f64, timescale: f64 },
    /// `2 D(t) δ(t - s)`
    WhiteNoise { intensity: TimeFunction },
}

impl Kernel {
    pub fn is_white(&self) -> bool {
        matches!(self, Kernel::WhiteNoise { .. })
    }

    /// Lag-zero covariance. Zero for white noise, whose variance is not defined pointwise.
    pub fn variance(&self) -> f64 {
        match *self {
            Kernel::GaussianFilter { variance, .. } => variance,
            Kernel::OrnsteinUhlenbeck { variance, .. } => variance,
            Kernel::WhiteNoise { .. } => 0.0,
        }
    }

    /// Covariance at lag `u = t - s`.
    pub fn covariance(&self, lag: f64) -> Result<f64> {
        match *self {
            Kernel::WhiteNoise { .. } => Err(Error::PointwiseUndefined),
            _ => Ok(self.cov(lag)),
        }
    }

    /// Covariance at lag for a non-white kernel (white noise evaluates to zero).
    pub(crate) fn cov(&self, lag: f64) -> f64 {
        match *self {
            Kernel::GaussianFilter {
                variance,
                shape,
                peak_freq,
            } => variance * (-(shape * lag).powi(2)).exp() * (peak_freq * lag).cos(),
            Kernel::OrnsteinUhlenbeck { variance, timescale } => variance * (-lag.abs() / timescale).exp(),
            Kernel::WhiteNoise { .. } => 0.0,
        }
    }

    /// Upper bound of `|C(u)| / C(0)`.
    fn envelope(&self, lag: f64) -> f64 {
        match *self {
            Kernel::GaussianFilter { shape, .. } => (-(shape * lag).powi(2)).exp(),
            Kernel::OrnsteinUhlenbeck { timescale, .. } => (-lag.abs() / timescale).exp(),
            Kernel::WhiteNoise { .. } => 0.0,
        }
    }

    /// Characteristic decay length used to size the divergence horizon.
    fn decay_scale(&self) -> f64 {
        match *self {
            Kernel::GaussianFilter { shape, .. } => 1.0 / shape,
            Kernel::OrnsteinUhlenbeck { timescale, .. } => timescale,
            Kernel::WhiteNoise { .. } => 0.0,
        }
    }

    /// Smallest lag beyond which `|C(u)| < rel * C(0)`.
    pub fn decay_horizon(&self, rel: f64) -> Result<f64> {
        if self.is_white() {
            return Err(Error::PointwiseUndefined);
        }
        let max_horizon = 1e3 * self.decay_scale();
        if !max_horizon.is_finite() || self.envelope(max_horizon) >= rel {
            return Err(Error::Divergence {
                horizon: max_horizon,
                threshold: rel,
            });
        }
        let h = match *self {
            Kernel::GaussianFilter { shape, .. } => (1.0 / rel).ln().sqrt() / shape,
            Kernel::OrnsteinUhlenbeck { timescale, .. } => timescale * (1.0 / rel).ln(),
            Kernel::WhiteNoise { .. } => unreachable!(),
        };
        Ok(h)
    }

    /// Points in `(0, horizon)` where `|C|` has a kink.
    fn kinks(&self, horizon: f64) -> Vec<f64> {
        match *self {
            Kernel::GaussianFilter { peak_freq, .. } if peak_freq != 0.0 => {
                let w = peak_freq.abs();
                (0..)
                    .map(|k| (k as f64 + 0.5) * PI / w)
                    .take_while(|&u| u < horizon)
                    .collect()
            }
            _ => Vec::new(),
        }
    }

    /// Same kernel shape with the variance multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Kernel {
        match self.clone() {
            Kernel::GaussianFilter {
                variance,
                shape,
                peak_freq,
            } => Kernel::GaussianFilter {
                variance: variance * c,
                shape,
                peak_freq,
            },
            Kernel::OrnsteinUhlenbeck { variance, timescale } => Kernel::OrnsteinUhlenbeck {
                variance: variance * c,
                timescale,
            },
            Kernel::WhiteNoise { intensity } => Kernel::WhiteNoise {
                intensity: match intensity {
                    TimeFunction::Zero => TimeFunction::Zero,
                    TimeFunction::Constant { value } => TimeFunction::Constant { value: value * c },
                    TimeFunction::Logistic {
                        amplitude,
                        rate,
                        midpoint,
                    } => TimeFunction::Logistic {
                        amplitude: amplitude * c,
                        rate,
                        midpoint,
                    },
                },
            },
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Kernel::GaussianFilter { variance, shape, .. } => {
                if !(variance >= 0.0) {
                    return Err(Error::Parameter(format!("variance {variance} < 0")));
                }
                if !(shape >= 0.0) {
                    return Err(Error::Parameter(format!("shape {shape} < 0")));
                }
            }
            Kernel::OrnsteinUhlenbeck { variance, timescale } => {
                if !(variance >= 0.0) {
                    return Err(Error::Parameter(format!("variance {variance} < 0")));
                }
                if !(timescale > 0.0) {
                    return Err(Error::Parameter(format!("timescale {timescale} <= 0")));
                }
            }
            Kernel::WhiteNoise { .. } => {}
        }
        Ok(())
    }
}

/// `C(0)⁻¹ ∫₀^∞ |C(u)| du`, integrated piecewise between the kinks of `|C|`
/// up to the lag where the kernel falls below `1e-8 C(0)`.
pub fn correlation_time(kernel: &Kernel) -> Result<f64> {
    let c0 = kernel.variance();
    if kernel.is_white() {
        return Err(Error::PointwiseUndefined);
    }
    if !(c0 > 0.0) {
        return Err(Error::Parameter("correlation time needs a positive variance".into()));
    }
    let horizon = kernel.decay_horizon(DECAY_CUTOFF)?;
    let mut edges = vec![0.0];
    edges.extend(kernel.kinks(horizon));
    edges.push(horizon);
    let f = |u: f64| (kernel.cov(u) / c0).abs();
    let total: f64 = edges
        .windows(2)
        .map(|w| adaptive_simpson(&f, w[0], w[1], 1e-13 * (w[1] - w[0]).max(1e-3)))
        .sum();
    Ok(total)
}

/// Kernel family with a free shape parameter `a`, used for calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kernel", rename_all = "snake_case")]
pub enum KernelFamily {
    GaussianFilter {
        variance: f64,
        peak_freq: f64,
    },
    /// Shape parameter is the decay rate `1 / timescale`.
    OrnsteinUhlenbeck {
        variance: f64,
    },
}

impl KernelFamily {
    pub fn with_shape(&self, a: f64) -> Kernel {
        match *self {
            KernelFamily::GaussianFilter { variance, peak_freq } => Kernel::GaussianFilter {
                variance,
                shape: a,
                peak_freq,
            },
            KernelFamily::OrnsteinUhlenbeck { variance } => Kernel::OrnsteinUhlenbeck {
                variance,
                timescale: 1.0 / a,
            },
        }
    }
}

/// Shape parameter `a ∈ [1e-3, 1e3]` giving `correlation_time == target_tau`
/// to 1e-6 relative, by bisection on `ln a` (τ_cor decreases with `a`).
pub fn calibrate_shape(family: &KernelFamily, target_tau: f64) -> Result<f64> {
    const LOW: f64 = 1e-3;
    const HIGH: f64 = 1e3;
    if !(target_tau > 0.0) {
        return Err(Error::Parameter(format!("target tau {target_tau} <= 0")));
    }
    let tau = |a: f64| correlation_time(&family.with_shape(a));
    let tau_low = tau(LOW)?;
    let tau_high = tau(HIGH)?;
    if !(target_tau <= tau_low && target_tau >= tau_high) {
        return Err(Error::Calibration {
            target: target_tau,
            low_a: LOW,
            high_a: HIGH,
            low_tau: tau_low,
            high_tau: tau_high,
        });
    }
    let (mut lo, mut hi) = (LOW.ln(), HIGH.ln());
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        let t = tau(mid.exp())?;
        if ((t - target_tau) / target_tau).abs() < 1e-11 {
            break;
        }
        if t > target_tau {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    Ok(mid.exp())
}

/// Cross-covariance between the initial state and the excitation fluctuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CrossCovariance {
    #[default]
    Zero,
    /// `cov(X⁰, ξ(t)) = weights · C(t - t₀) / σ`, i.e. the initial state loads
    /// `weights` on the normalized excitation value at `t₀`.
    KernelScaled { weights: Vec<f64> },
}

/// Gaussian law of the initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLaw {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianLaw {
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>) -> Self {
        Self {
            mean: DVector::from_vec(mean),
            cov,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Complete excitation law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcitationSpec {
    pub mean: TimeFunction,
    pub kernel: Kernel,
    #[serde(default)]
    pub cross_cov: CrossCovariance,
    /// Weight of the scalar excitation in each state equation.
    pub forcing: Vec<f64>,
    /// Initial time, the reference for the cross-covariance.
    #[serde(default)]
    pub t0: f64,
}

impl ExcitationSpec {
    /// Excitation acting on the velocity equation of a 2-state oscillator.
    pub fn oscillator(kernel: Kernel, mean: TimeFunction) -> Result<Self> {
        let spec = Self {
            mean,
            kernel,
            cross_cov: CrossCovariance::Zero,
            forcing: vec![0.0, 1.0],
            t0: 0.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_cross_cov(mut self, cross_cov: CrossCovariance) -> Result<Self> {
        self.cross_cov = cross_cov;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if let CrossCovariance::KernelScaled { weights } = &self.cross_cov {
            if weights.len() != self.forcing.len() {
                return Err(Error::Parameter(format!(
                    "cross-covariance has {} weights for a {}-state system",
                    weights.len(),
                    self.forcing.len()
                )));
            }
            if self.kernel.is_white() {
                return Err(Error::Unsupported(
                    "initial-state cross-covariance with white noise".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.forcing.len()
    }

    pub fn mean_at(&self, t: f64) -> f64 {
        self.mean.eval(t)
    }

    /// Covariance `C(t, s)` of the scalar excitation.
    pub fn kernel_eval(&self, t: f64, s: f64) -> Result<f64> {
        self.kernel.covariance(t - s)
    }

    /// `C_{X⁰Ξ}(t)`: covariance of each initial-state component with `ξ(t)`.
    pub fn cross_covariance(&self, t: f64) -> Vec<f64> {
        match &self.cross_cov {
            CrossCovariance::Zero => vec![0.0; self.dim()],
            CrossCovariance::KernelScaled { weights } => {
                let sigma = self.kernel.variance().sqrt();
                if sigma == 0.0 {
                    return vec![0.0; self.dim()];
                }
                let c = self.kernel.cov(t - self.t0) / sigma;
                weights.iter().map(|w| w * c).collect()
            }
        }
    }

    pub fn has_cross_cov(&self) -> bool {
        match &self.cross_cov {
            CrossCovariance::Zero => false,
            CrossCovariance::KernelScaled { weights } => weights.iter().any(|w| *w != 0.0),
        }
    }
}

/// Sampled excitation paths (mean included) on a common time grid.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub times: Vec<f64>,
    /// Row-major `n_paths × times.len()`.
    pub values: Vec<f64>,
    pub n_paths: usize,
    pub seed: u64,
    pub initial_states: Option<Vec<DVector<f64>>>,
}

impl PathEnsemble {
    pub fn path(&self, i: usize) -> &[f64] {
        let m = self.times.len();
        &self.values[i * m..(i + 1) * m]
    }
}

/// How the joint covariance is factorized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMethod {
    /// Circulant embedding when the grid and cross-covariance allow it, dense otherwise.
    #[default]
    Auto,
    Dense,
    Circulant,
}

/// One draw: fluctuation values on the grid plus the initial state.
#[derive(Debug, Clone)]
pub struct PathDraw {
    pub noise: Vec<f64>,
    pub x0: Option<DVector<f64>>,
}

enum Factor {
    /// No randomness in the excitation.
    Silent,
    /// Lower Cholesky factor of the joint covariance of `(X⁰, ξ(t₁..t_M))`
    /// when `joint_x0` is set, of `ξ` alone otherwise.
    Dense { chol: DMatrix<f64>, joint_x0: bool },
    Circulant {
        len: usize,
        sqrt_eigs: Vec<f64>,
        fft: Arc<dyn Fft<f64>>,
    },
}

/// Exact Gaussian sampler for `(X⁰, ξ)` on a fixed grid.
///
/// Paths are generated in pairs; pair `k` draws from ChaCha stream `k` of the
/// seed, so every path depends only on `(seed, index)`.
pub struct PathSampler {
    times: Vec<f64>,
    factor: Factor,
    initial: Option<InitialFactor>,
    sigma: f64,
}

struct InitialFactor {
    mean: DVector<f64>,
    /// Square root of the part of the initial covariance not explained by the excitation.
    root: DMatrix<f64>,
    /// Loading on `ξ(t₀) / σ` (circulant path only).
    loading: Option<DVector<f64>>,
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals)
}

fn cholesky_with_jitter(mut m: DMatrix<f64>, scale: f64) -> Result<DMatrix<f64>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c.l());
    }
    let jitter = PSD_JITTER * scale;
    for i in 0..m.nrows() {
        m[(i, i)] += jitter;
    }
    Cholesky::new(m).map(|c| c.l()).ok_or(Error::NotPsd { jitter })
}

fn is_uniform(times: &[f64]) -> bool {
    if times.len() < 3 {
        return true;
    }
    let h = times[1] - times[0];
    times
        .windows(2)
        .all(|w| ((w[1] - w[0]) - h).abs() <= 1e-9 * h.abs().max(1e-300))
}

impl PathSampler {
    pub fn new(
        spec: &ExcitationSpec,
        times: &[f64],
        initial: Option<&GaussianLaw>,
        method: SamplingMethod,
    ) -> Result<Self> {
        if spec.kernel.is_white() {
            return Err(Error::Unsupported(
                "path sampling of white noise (use increments)".into(),
            ));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Parameter("time grid must be strictly increasing".into()));
        }
        let variance = spec.kernel.variance();
        let sigma = variance.sqrt();
        let cross = spec.has_cross_cov() && initial.is_some() && sigma > 0.0;
        let starts_at_t0 = times
            .first()
            .map(|t| (t - spec.t0).abs() <= 1e-12 * (1.0 + spec.t0.abs()))
            .unwrap_or(false);
        let circulant_ok = is_uniform(times) && times.len() >= 2 && (!cross || starts_at_t0);
        let use_circulant = match method {
            SamplingMethod::Dense => false,
            SamplingMethod::Circulant => {
                if !circulant_ok {
                    return Err(Error::Unsupported(
                        "circulant embedding needs a uniform grid starting at t0".into(),
                    ));
                }
                true
            }
            SamplingMethod::Auto => circulant_ok && times.len() > 512,
        };

        if variance == 0.0 {
            let initial = initial.map(|law| InitialFactor {
                mean: law.mean.clone(),
                root: sym_sqrt(&law.cov),
                loading: None,
            });
            return Ok(Self {
                times: times.to_vec(),
                factor: Factor::Silent,
                initial,
                sigma,
            });
        }

        if use_circulant {
            let (len, sqrt_eigs, fft) = circulant_factor(&spec.kernel, times)?;
            let initial = match initial {
                None => None,
                Some(law) => {
                    let loading = match (&spec.cross_cov, cross) {
                        (CrossCovariance::KernelScaled { weights }, true) => Some(DVector::from_column_slice(weights)),
                        _ => None,
                    };
                    let mut resid = law.cov.clone();
                    if let Some(w) = &loading {
                        resid -= w * w.transpose();
                        let min = SymmetricEigen::new(resid.clone()).eigenvalues.min();
                        let scale = law.cov.diagonal().max().max(1e-300);
                        if min < -PSD_JITTER * scale * 1e3 {
                            return Err(Error::NotPsd {
                                jitter: PSD_JITTER * scale,
                            });
                        }
                    }
                    Some(InitialFactor {
                        mean: law.mean.clone(),
                        root: sym_sqrt(&resid),
                        loading,
                    })
                }
            };
            return Ok(Self {
                times: times.to_vec(),
                factor: Factor::Circulant { len, sqrt_eigs, fft },
                initial,
                sigma,
            });
        }

        let m = times.len();
        if cross {
            let law = initial.expect("cross implies initial");
            let n = law.dim();
            let mut joint = DMatrix::zeros(n + m, n + m);
            joint.view_mut((0, 0), (n, n)).copy_from(&law.cov);
            for (j, &tj) in times.iter().enumerate() {
                let c = spec.cross_covariance(tj);
                for i in 0..n {
                    joint[(i, n + j)] = c[i];
                    joint[(n + j, i)] = c[i];
                }
                for (k, &tk) in times.iter().enumerate() {
                    joint[(n + j, n + k)] = spec.kernel.cov(tj - tk);
                }
            }
            let scale = variance.max(law.cov.diagonal().max());
            let chol = cholesky_with_jitter(joint, scale)?;
            Ok(Self {
                times: times.to_vec(),
                factor: Factor::Dense { chol, joint_x0: true },
                initial: Some(InitialFactor {
                    mean: law.mean.clone(),
                    root: DMatrix::zeros(n, n),
                    loading: None,
                }),
                sigma,
            })
        } else {
            let cov = DMatrix::from_fn(m, m, |j, k| spec.kernel.cov(times[j] - times[k]));
            let chol = cholesky_with_jitter(cov, variance)?;
            let initial = initial.map(|law| InitialFactor {
                mean: law.mean.clone(),
                root: sym_sqrt(&law.cov),
                loading: None,
            });
            Ok(Self {
                times: times.to_vec(),
                factor: Factor::Dense { chol, joint_x0: false },
                initial,
                sigma,
            })
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn is_circulant(&self) -> bool {
        matches!(self.factor, Factor::Circulant { .. })
    }

    /// Draw paths `2k` and `2k + 1`.
    pub fn draw_pair(&self, seed: u64, pair: u64) -> (PathDraw, PathDraw) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(pair);
        let m = self.times.len();
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        match &self.factor {
            Factor::Silent => {
                let a = self.finish(vec![0.0; m], None, &mut normal);
                let b = self.finish(vec![0.0; m], None, &mut normal);
                (a, b)
            }
            Factor::Dense { chol, joint_x0 } => {
                let one = |normal: &mut dyn FnMut() -> f64| {
                    let z = DVector::from_fn(chol.nrows(), |_, _| normal());
                    let x = chol * z;
                    if *joint_x0 {
                        let init = self.initial.as_ref().expect("joint sampler has law");
                        let n = init.mean.len();
                        let x0 = &init.mean + x.rows(0, n);
                        PathDraw {
                            noise: x.rows(n, m).iter().copied().collect(),
                            x0: Some(x0),
                        }
                    } else {
                        self.finish(x.iter().copied().collect(), None, normal)
                    }
                };
                let a = one(&mut normal);
                let b = one(&mut normal);
                (a, b)
            }
            Factor::Circulant { len, sqrt_eigs, fft } => {
                let mut buf: Vec<Complex<f64>> = sqrt_eigs
                    .iter()
                    .map(|s| Complex::new(s * normal(), s * normal()))
                    .collect();
                debug_assert_eq!(buf.len(), *len);
                fft.process(&mut buf);
                let re: Vec<f64> = buf[..m].iter().map(|c| c.re).collect();
                let im: Vec<f64> = buf[..m].iter().map(|c| c.im).collect();
                let xi0a = re[0];
                let xi0b = im[0];
                let a = self.finish(re, Some(xi0a), &mut normal);
                let b = self.finish(im, Some(xi0b), &mut normal);
                (a, b)
            }
        }
    }

    fn finish(&self, noise: Vec<f64>, xi_at_t0: Option<f64>, normal: &mut dyn FnMut() -> f64) -> PathDraw {
        let x0 = self.initial.as_ref().map(|init| {
            let n = init.mean.len();
            let z = DVector::from_fn(n, |_, _| normal());
            let mut x = &init.mean + &init.root * z;
            if let (Some(w), Some(xi)) = (&init.loading, xi_at_t0) {
                x += w * (xi / self.sigma);
            }
            x
        });
        PathDraw { noise, x0 }
    }
}

/// Embedding length, square-rooted scaled eigenvalues and the FFT plan.
type CirculantParts = (usize, Vec<f64>, Arc<dyn Fft<f64>>);

/// Square-rooted, scaled eigenvalues of the minimal non-negative circulant embedding.
fn circulant_factor(kernel: &Kernel, times: &[f64]) -> Result<CirculantParts> {
    let m = times.len();
    let h = (times[m - 1] - times[0]) / (m - 1) as f64;
    let mut len = (2 * (m - 1)).next_power_of_two().max(2);
    let mut planner = FftPlanner::new();
    for attempt in 0..5 {
        let half = len / 2;
        let mut c: Vec<Complex<f64>> = (0..len)
            .map(|j| {
                let lag = if j <= half { j } else { len - j };
                Complex::new(kernel.cov(lag as f64 * h), 0.0)
            })
            .collect();
        let fft = planner.plan_fft_forward(len);
        fft.process(&mut c);
        let max = c.iter().map(|z| z.re).fold(0.0, f64::max);
        let min = c.iter().map(|z| z.re).fold(f64::INFINITY, f64::min);
        if min >= -1e-8 * max || attempt == 4 {
            if min < 0.0 {
                log::debug!("circulant embedding: clipping eigenvalue {min:e} (max {max:e})");
            }
            let sqrt_eigs = c.iter().map(|z| (z.re.max(0.0) / len as f64).sqrt()).collect();
            return Ok((len, sqrt_eigs, fft));
        }
        len *= 2;
    }
    unreachable!()
}

/// Sample `n_paths` excitation paths `m_Ξ(t) + ξ(t)` on `times`, with initial
/// states drawn jointly when `initial` is given.
pub fn sample_paths(
    spec: &ExcitationSpec,
    times: &[f64],
    n_paths: usize,
    seed: u64,
    initial: Option<&GaussianLaw>,
) -> Result<PathEnsemble> {
    let sampler = PathSampler::new(spec, times, initial, SamplingMethod::Auto)?;
    let m = times.len();
    let means: Vec<f64> = times.iter().map(|&t| spec.mean_at(t)).collect();
    let mut values = Vec::with_capacity(n_paths * m);
    let mut initial_states = initial.map(|_| Vec::with_capacity(n_paths));
    let mut push = |d: PathDraw| {
        values.extend(d.noise.iter().zip(&means).map(|(x, mu)| x + mu));
        if let (Some(v), Some(x0)) = (initial_states.as_mut(), d.x0) {
            v.push(x0);
        }
    };
    for pair in 0..n_paths.div_ceil(2) {
        let (a, b) = sampler.draw_pair(seed, pair as u64);
        push(a);
        if 2 * pair + 1 < n_paths {
            push(b);
        }
    }
    Ok(PathEnsemble {
        times: times.to_vec(),
        values,
        n_paths,
        seed,
        initial_states,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn gf(variance: f64, shape: f64, peak_freq: f64) -> Kernel {
        Kernel::GaussianFilter {
            variance,
            shape,
            peak_freq,
        }
    }

    #[test]
    fn gaussian_filter_lag_zero_is_variance() {
        let spec = ExcitationSpec::oscillator(gf(1.0, 0.7, 2.5), TimeFunction::Zero).unwrap();
        assert_eq!(spec.kernel_eval(3.0, 3.0).unwrap(), 1.0);
    }

    #[test]
    fn ou_kernel_at_one_timescale() {
        let k = Kernel::OrnsteinUhlenbeck {
            variance: 2.0,
            timescale: 0.5,
        };
        assert_relative_eq!(k.covariance(0.5).unwrap(), 2.0 * (-1.0f64).exp(), max_relative = 1e-15);
    }

    #[test]
    fn white_noise_pointwise_is_an_error() {
        let k = Kernel::WhiteNoise {
            intensity: TimeFunction::Constant { value: 1.0 },
        };
        assert!(matches!(k.covariance(0.0), Err(Error::PointwiseUndefined)));
        assert!(correlation_time(&k).is_err());
    }

    #[test]
    fn non_decaying_kernel_diverges() {
        let k = gf(1.0, 0.0, 2.0);
        assert!(matches!(correlation_time(&k), Err(Error::Divergence { .. })));
    }

    #[test]
    fn ou_correlation_time_is_timescale() {
        let k = Kernel::OrnsteinUhlenbeck {
            variance: 1.3,
            timescale: 0.37,
        };
        assert_relative_eq!(correlation_time(&k).unwrap(), 0.37, max_relative = 1e-6);
    }

    #[test]
    fn gaussian_correlation_time_without_oscillation() {
        let a = 1.7;
        let tau = correlation_time(&gf(1.0, a, 0.0)).unwrap();
        assert_relative_eq!(tau, PI.sqrt() / (2.0 * a), max_relative = 1e-6);
    }

    #[test]
    fn calibration_inverts_gaussian_closed_form() {
        let fam = KernelFamily::GaussianFilter {
            variance: 1.0,
            peak_freq: 0.0,
        };
        let target = 0.4;
        let a = calibrate_shape(&fam, target).unwrap();
        assert_relative_eq!(a, PI.sqrt() / (2.0 * target), max_relative = 1e-6);
        let back = correlation_time(&fam.with_shape(a)).unwrap();
        assert!(((back - target) / target).abs() <= 1e-6);
    }

    #[test]
    fn calibration_reports_bracket() {
        let fam = KernelFamily::GaussianFilter {
            variance: 1.0,
            peak_freq: 2.5,
        };
        match calibrate_shape(&fam, 1e-6) {
            Err(Error::Calibration { low_tau, high_tau, .. }) => {
                assert!(low_tau > high_tau);
            }
            other => panic!("expected calibration error, got {other:?}"),
        }
    }

    #[test]
    fn zero_variance_paths_equal_mean() {
        let spec = ExcitationSpec::oscillator(
            gf(0.0, 1.0, 2.5),
            TimeFunction::Logistic {
                amplitude: 0.5,
                rate: 6.0,
                midpoint: 1.0,
            },
        )
        .unwrap();
        let times: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let ens = sample_paths(&spec, &times, 5, 3, None).unwrap();
        for p in 0..5 {
            for (v, t) in ens.path(p).iter().zip(&times) {
                assert_eq!(*v, spec.mean_at(*t));
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = ExcitationSpec::oscillator(gf(0.36, 2.0, 2.5), TimeFunction::Zero).unwrap();
        let times: Vec<f64> = (0..700).map(|i| i as f64 * 0.01).collect();
        let a = sample_paths(&spec, &times, 7, 11, None).unwrap();
        let b = sample_paths(&spec, &times, 7, 11, None).unwrap();
        assert_eq!(a.values, b.values);
        let c = sample_paths(&spec, &times, 7, 12, None).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn logistic_mean_limits() {
        let f = TimeFunction::Logistic {
            amplitude: 0.5,
            rate: 6.0,
            midpoint: 1.0,
        };
        assert_relative_eq!(f.eval(1.0), 0.25);
        assert!(f.eval(100.0) > 0.5 - 1e-12);
        assert!(f.eval(-1000.0).abs() < 1e-12);
    }
}
