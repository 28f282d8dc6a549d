//! TOML run configuration and its resolution into solver inputs.
//!
//! Every block except `solver`, `mc` and `bench` is required. The kernel
//! width is given by exactly one of `tau_tilde`, `tau_cor` or `shape`.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use pdfevo::dynamics::{Duffing, LinearOscillator, SystemModel};
use pdfevo::excitation::{
    calibrate_shape, correlation_time, CrossCovariance, ExcitationSpec, GaussianLaw, Kernel, KernelFamily,
    SamplingMethod, TimeFunction,
};
use pdfevo::grid::GridSpec;
use pdfevo::montecarlo::{Estimator, McConfig};
use pdfevo::solver::SolverConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed configuration: {0}")]
    Parse(String),
    #[error("`{key}`: {message}")]
    Invalid { key: String, message: String },
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub system: SystemConfig,
    pub excitation: ExcitationConfig,
    pub initial: InitialConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub mc: McSection,
    pub output: OutputConfig,
    #[serde(default)]
    pub bench: BenchConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemConfig {
    /// Nondimensional bistable oscillator `ẍ + 2ζẋ − x + x³ = Ξ`.
    Duffing {
        zeta: f64,
    },
    LinearOscillator {
        zeta: f64,
        omega0: f64,
    },
}

impl SystemConfig {
    pub fn model(&self) -> Result<Box<dyn SystemModel>, ConfigError> {
        match *self {
            SystemConfig::Duffing { zeta } => Duffing::new(zeta)
                .map(|m| Box::new(m) as Box<dyn SystemModel>)
                .map_err(|e| invalid("system.zeta", e.to_string())),
            SystemConfig::LinearOscillator { zeta, omega0 } => LinearOscillator::new(zeta, omega0)
                .map(|m| Box::new(m) as Box<dyn SystemModel>)
                .map_err(|e| invalid("system", e.to_string())),
        }
    }

    /// Relaxation time `1 / (ζ ω₀)` of the unforced linearised oscillator.
    pub fn relaxation_time(&self) -> f64 {
        match *self {
            SystemConfig::Duffing { zeta } => 1.0 / zeta,
            SystemConfig::LinearOscillator { zeta, omega0 } => 1.0 / (zeta * omega0),
        }
    }

    pub fn linear_oscillator(&self) -> Option<LinearOscillator> {
        match *self {
            SystemConfig::LinearOscillator { zeta, omega0 } => Some(LinearOscillator { zeta, omega0 }),
            SystemConfig::Duffing { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    GaussianFilter,
    OrnsteinUhlenbeck,
    WhiteNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExcitationConfig {
    pub kernel: KernelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peak_freq: Option<f64>,
    /// Correlation time relative to the relaxation time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_tilde: Option<f64>,
    /// Absolute correlation time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_cor: Option<f64>,
    /// Kernel shape `a` (Gaussian filter) or `1 / timescale` (OU).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<f64>,
    /// Overrides the default relaxation time `1 / (ζ ω₀)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_relax: Option<f64>,
    /// White-noise intensity `D(t)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intensity: Option<TimeFunction>,
    #[serde(default)]
    pub mean: TimeFunction,
    #[serde(default)]
    pub cross_cov: CrossCovariance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub mean: Vec<f64>,
    /// Row-major rows of the covariance matrix.
    pub cov: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub nodes: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McSection {
    pub n_paths: usize,
    pub dt: f64,
    pub noise_dt: f64,
    pub sampling: SamplingMethod,
    pub estimator: Estimator,
}

impl Default for McSection {
    fn default() -> Self {
        let d = McConfig::default();
        Self {
            n_paths: d.n_paths,
            dt: d.dt,
            noise_dt: d.noise_dt,
            sampling: d.sampling,
            estimator: Estimator::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub times: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Directory of a prior `mc` (or `solve`) run providing the moments.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub moments_dir: Option<PathBuf>,
    pub t_end: f64,
    /// Spacing of the reported times.
    pub step: f64,
    /// RK4 substeps per unit time for the reference.
    pub rk4_steps_per_unit: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            moments_dir: None,
            t_end: 3.0,
            step: 0.05,
            rk4_steps_per_unit: 2000,
        }
    }
}

/// Configuration turned into the objects the library consumes.
#[derive(Debug)]
pub struct Experiment {
    pub model: Box<dyn SystemModel>,
    pub spec: ExcitationSpec,
    pub initial: GaussianLaw,
    pub grid: GridSpec,
    /// Correlation time of the kernel (`None` for white noise).
    pub tau_cor: Option<f64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config = Self::parse(&text)?;
        config.resolve()?;
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always representable in TOML")
    }

    pub fn mc_config(&self) -> McConfig {
        McConfig {
            n_paths: self.mc.n_paths,
            dt: self.mc.dt,
            noise_dt: self.mc.noise_dt,
            output_times: self.output.times.clone(),
            seed: self.seed,
            sampling: self.mc.sampling,
        }
    }

    /// Validates every block and builds the model, excitation, initial law and grid.
    pub fn resolve(&self) -> Result<Experiment, ConfigError> {
        let model = self.system.model()?;
        let (kernel, tau_cor) = self.kernel()?;
        let spec = ExcitationSpec::oscillator(kernel, self.excitation.mean.clone())
            .and_then(|s| s.with_cross_cov(self.excitation.cross_cov.clone()))
            .map_err(|e| invalid("excitation", e.to_string()))?;
        let initial = self.initial_law()?;
        if spec.has_cross_cov() && spec.kernel.is_white() {
            return Err(invalid("excitation.cross_cov", "not available for white noise"));
        }
        let g = &self.grid;
        let grid = GridSpec::new(g.lo, g.hi, g.nodes).map_err(|e| invalid("grid", e.to_string()))?;
        self.solver.validate().map_err(|e| invalid("solver", e.to_string()))?;
        let times = &self.output.times;
        if times.is_empty() {
            return Err(invalid("output.times", "at least one output time is required"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) || !(times[0] > 0.0) {
            return Err(invalid(
                "output.times",
                "times must be positive and strictly increasing",
            ));
        }
        self.mc_config().validate().map_err(|e| invalid("mc", e.to_string()))?;
        Ok(Experiment {
            model,
            spec,
            initial,
            grid,
            tau_cor,
        })
    }

    fn initial_law(&self) -> Result<GaussianLaw, ConfigError> {
        let init = &self.initial;
        if init.mean.len() != 2 {
            return Err(invalid("initial.mean", "expected two components"));
        }
        if init.cov.len() != 2 || init.cov.iter().any(|r| r.len() != 2) {
            return Err(invalid("initial.cov", "expected a 2×2 matrix"));
        }
        let c = &init.cov;
        let flat: Vec<f64> = c.iter().flatten().copied().collect();
        if flat.iter().any(|v| !v.is_finite()) || init.mean.iter().any(|v| !v.is_finite()) {
            return Err(invalid("initial", "entries must be finite"));
        }
        if c[0][1] != c[1][0] {
            return Err(invalid("initial.cov", "matrix must be symmetric"));
        }
        if !(c[0][0] > 0.0 && c[1][1] > 0.0 && c[0][0] * c[1][1] - c[0][1] * c[1][0] > 0.0) {
            return Err(invalid("initial.cov", "matrix must be positive definite"));
        }
        Ok(GaussianLaw::new(
            init.mean.clone(),
            DMatrix::from_row_slice(2, 2, &flat),
        ))
    }

    fn kernel(&self) -> Result<(Kernel, Option<f64>), ConfigError> {
        let e = &self.excitation;
        if e.kernel == KernelKind::WhiteNoise {
            for (key, set) in [
                ("variance", e.variance.is_some()),
                ("peak_freq", e.peak_freq.is_some()),
                ("tau_tilde", e.tau_tilde.is_some()),
                ("tau_cor", e.tau_cor.is_some()),
                ("shape", e.shape.is_some()),
            ] {
                if set {
                    return Err(invalid(&format!("excitation.{key}"), "not used by white noise"));
                }
            }
            let intensity = e
                .intensity
                .clone()
                .ok_or_else(|| invalid("excitation.intensity", "required for white noise"))?;
            return Ok((Kernel::WhiteNoise { intensity }, None));
        }
        if e.intensity.is_some() {
            return Err(invalid("excitation.intensity", "only used by white noise"));
        }
        let variance = e
            .variance
            .ok_or_else(|| invalid("excitation.variance", "required for coloured noise"))?;
        if !(variance > 0.0) {
            return Err(invalid("excitation.variance", format!("{variance} must be positive")));
        }
        let family = match e.kernel {
            KernelKind::GaussianFilter => {
                let peak_freq = e
                    .peak_freq
                    .ok_or_else(|| invalid("excitation.peak_freq", "required for the Gaussian filter"))?;
                if !(peak_freq >= 0.0) {
                    return Err(invalid(
                        "excitation.peak_freq",
                        format!("{peak_freq} must be non-negative"),
                    ));
                }
                KernelFamily::GaussianFilter { variance, peak_freq }
            }
            KernelKind::OrnsteinUhlenbeck => {
                if e.peak_freq.is_some() {
                    return Err(invalid("excitation.peak_freq", "not used by the OU kernel"));
                }
                KernelFamily::OrnsteinUhlenbeck { variance }
            }
            KernelKind::WhiteNoise => unreachable!(),
        };
        let given: Vec<&str> = [
            ("tau_tilde", e.tau_tilde.is_some()),
            ("tau_cor", e.tau_cor.is_some()),
            ("shape", e.shape.is_some()),
        ]
        .iter()
        .filter(|(_, set)| *set)
        .map(|(k, _)| *k)
        .collect();
        if given.len() != 1 {
            return Err(invalid(
                "excitation.tau_tilde",
                format!(
                    "exactly one of tau_tilde, tau_cor and shape must be set (found {})",
                    if given.is_empty() {
                        "none".to_string()
                    } else {
                        given.join(", ")
                    }
                ),
            ));
        }
        if e.tau_relax.is_some() && e.tau_tilde.is_none() {
            return Err(invalid("excitation.tau_relax", "only used together with tau_tilde"));
        }
        let shape = if let Some(a) = e.shape {
            if !(a > 0.0) {
                return Err(invalid("excitation.shape", format!("{a} must be positive")));
            }
            a
        } else {
            let (key, target) = match (e.tau_tilde, e.tau_cor) {
                (Some(tt), _) => {
                    let relax = e.tau_relax.unwrap_or_else(|| self.system.relaxation_time());
                    if !(relax > 0.0) {
                        return Err(invalid("excitation.tau_relax", format!("{relax} must be positive")));
                    }
                    ("excitation.tau_tilde", tt * relax)
                }
                (None, Some(tc)) => ("excitation.tau_cor", tc),
                (None, None) => unreachable!(),
            };
            if !(target > 0.0) {
                return Err(invalid(key, "correlation time must be positive"));
            }
            calibrate_shape(&family, target).map_err(|e| invalid(key, e.to_string()))?
        };
        let kernel = family.with_shape(shape);
        let tau = correlation_time(&kernel).map_err(|e| invalid("excitation", e.to_string()))?;
        Ok((kernel, Some(tau)))
    }
}
