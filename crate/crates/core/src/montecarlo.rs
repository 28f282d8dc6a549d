//! Monte Carlo reference: response paths integrated under sampled excitation
//! paths, with histogram densities and moment estimates carrying standard
//! errors.
//!
//! Coloured-noise paths are integrated with classical RK4, the fluctuation
//! being linearly interpolated between its grid samples and the mean
//! evaluated exactly. White noise uses Euler–Maruyama. Paths run in fixed
//! blocks in parallel and are reduced in block order, so results depend only
//! on `(seed, config)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Monomial, SystemModel};
use crate::error::{Error, Result};
use crate::excitation::{ExcitationSpec, GaussianLaw, Kernel, PathSampler, SamplingMethod};
use crate::grid::{GridSpec, PdfField};

/// Paths whose state norm exceeds this are flagged as divergent.
pub const DIVERGENCE_NORM: f64 = 1e3;

/// Fewest paths accepted by [`McConfig::validate`].
pub const MIN_PATHS: usize = 1000;

/// Fraction of samples outside the grid above which a warning is logged.
pub const OUTSIDE_WARN_FRACTION: f64 = 1e-3;

/// Path pairs per parallel block.
const BLOCK_PAIRS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McConfig {
    pub n_paths: usize,
    /// Integrator substep.
    pub dt: f64,
    /// Spacing of the excitation samples; a multiple of `dt`.
    pub noise_dt: f64,
    pub output_times: Vec<f64>,
    pub seed: u64,
    pub sampling: SamplingMethod,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n_paths: 100_000,
            dt: 0.005,
            noise_dt: 0.01,
            output_times: Vec::new(),
            seed: 0,
            sampling: SamplingMethod::Auto,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_paths < MIN_PATHS {
            return Err(Error::Parameter(format!(
                "n_paths = {} is below the minimum of {MIN_PATHS}",
                self.n_paths
            )));
        }
        if !(self.dt > 0.0 && self.noise_dt > 0.0) {
            return Err(Error::Parameter("dt and noise_dt must be positive".into()));
        }
        self.substeps()?;
        if self.output_times.is_empty() {
            return Err(Error::Parameter("no output times".into()));
        }
        if self.output_times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Parameter("output times must be strictly increasing".into()));
        }
        Ok(())
    }

    /// The substep must resolve the solver step at least twice over.
    pub fn check_against_solver(&self, solver_dt: f64) -> Result<()> {
        if self.dt > solver_dt / 2.0 * (1.0 + 1e-12) {
            return Err(Error::Parameter(format!(
                "Monte Carlo dt = {} exceeds half the solver step {}",
                self.dt, solver_dt
            )));
        }
        Ok(())
    }

    fn substeps(&self) -> Result<usize> {
        let r = self.noise_dt / self.dt;
        let k = r.round();
        if k < 1.0 || (r - k).abs() > 1e-9 * r {
            return Err(Error::Parameter(format!(
                "noise_dt = {} is not a multiple of dt = {}",
                self.noise_dt, self.dt
            )));
        }
        Ok(k as usize)
    }
}

/// Mean and standard error of a set of functionals along the noise grid.
#[derive(Debug, Clone, Serialize)]
pub struct MomentTrace {
    pub times: Vec<f64>,
    pub functionals: Vec<Monomial>,
    /// `mean[k][q]`: functional `q` at time `k`.
    pub mean: Vec<Vec<f64>>,
    pub stderr: Vec<Vec<f64>>,
}

impl MomentTrace {
    /// Index of a functional, if traced.
    pub fn position(&self, m: &Monomial) -> Option<usize> {
        self.functionals.iter().position(|f| f == m)
    }

    /// Values of functional `q` at every traced time.
    pub fn series(&self, q: usize) -> Vec<f64> {
        self.mean.iter().map(|row| row[q]).collect()
    }
}

#[derive(Debug, Clone)]
pub struct McOutput {
    pub dim: usize,
    pub output_times: Vec<f64>,
    /// Per output time, row-major `n_kept × dim`.
    pub samples: Vec<Vec<f64>>,
    pub n_kept: usize,
    pub diverged: usize,
    pub trace: MomentTrace,
}

impl McOutput {
    pub fn samples_at(&self, t: f64) -> Option<&[f64]> {
        self.output_times
            .iter()
            .position(|&s| (s - t).abs() <= 1e-9 * (1.0 + t.abs()))
            .map(|i| self.samples[i].as_slice())
    }
}

/// All monomials of degree one and two in `n` variables.
pub fn second_order_functionals(n: usize) -> Vec<Monomial> {
    let mut out: Vec<Monomial> = (0..n).map(|i| Monomial::axis_power(n, i, 1)).collect();
    for i in 0..n {
        for j in i..n {
            let mut e = vec![0; n];
            e[i] += 1;
            e[j] += 1;
            out.push(Monomial::new(e));
        }
    }
    out
}

/// Running sums of the traced functionals.
#[derive(Clone)]
struct Sums {
    s1: Vec<f64>,
    s2: Vec<f64>,
}

impl Sums {
    fn zeros(len: usize) -> Self {
        Self {
            s1: vec![0.0; len],
            s2: vec![0.0; len],
        }
    }

    fn merge(&mut self, other: &Sums) {
        for (a, b) in self.s1.iter_mut().zip(&other.s1) {
            *a += b;
        }
        for (a, b) in self.s2.iter_mut().zip(&other.s2) {
            *a += b;
        }
    }
}

struct BlockResult {
    /// Per output time, kept states in path order.
    samples: Vec<Vec<f64>>,
    kept: usize,
    diverged: usize,
    sums: Sums,
}

/// Integrates `n_paths` response paths and records the states at the output times.
pub fn simulate(
    model: &dyn SystemModel,
    spec: &ExcitationSpec,
    initial: &GaussianLaw,
    config: &McConfig,
) -> Result<McOutput> {
    config.validate()?;
    spec.validate()?;
    let n = model.dim();
    if spec.dim() != n || initial.dim() != n {
        return Err(Error::Parameter(format!(
            "dimension mismatch: model {n}, forcing {}, initial law {}",
            spec.dim(),
            initial.dim()
        )));
    }
    if config.output_times[0] < spec.t0 {
        return Err(Error::Domain {
            t: config.output_times[0],
            lo: spec.t0,
            hi: f64::INFINITY,
        });
    }
    let substeps = config.substeps()?;
    let h = config.noise_dt;
    let t_end = *config.output_times.last().expect("validated");
    let n_int = ((t_end - spec.t0) / h - 1e-9).ceil().max(1.0) as usize;
    let times: Vec<f64> = (0..=n_int).map(|k| spec.t0 + k as f64 * h).collect();
    let output_index: Vec<usize> = config
        .output_times
        .iter()
        .map(|&t| {
            let k = ((t - spec.t0) / h).round();
            if ((t - spec.t0) / h - k).abs() > 1e-6 {
                Err(Error::Parameter(format!(
                    "output time {t} is not on the excitation grid of spacing {h}"
                )))
            } else {
                Ok(k as usize)
            }
        })
        .collect::<Result<_>>()?;

    let functionals = second_order_functionals(n);
    let path = PathIntegrator {
        model,
        spec,
        times: &times,
        substeps,
        functionals: &functionals,
        output_index: &output_index,
    };

    let n_pairs = config.n_paths.div_ceil(2);
    let blocks: Vec<(usize, usize)> = (0..n_pairs)
        .step_by(BLOCK_PAIRS)
        .map(|p| (p, (p + BLOCK_PAIRS).min(n_pairs)))
        .collect();

    let results: Vec<BlockResult> = match &spec.kernel {
        Kernel::WhiteNoise { intensity } => {
            let gauss_x0 = initial_sampler(initial);
            blocks
                .par_iter()
                .map(|&(p0, p1)| {
                    let mut block = path.empty_block(config.output_times.len());
                    for idx in 2 * p0..(2 * p1).min(config.n_paths) {
                        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                        rng.set_stream(idx as u64);
                        let x0 = gauss_x0(&mut rng);
                        let trace = path.euler_maruyama(&x0, |t| intensity.eval(t), &mut rng);
                        path.accumulate(&mut block, trace);
                    }
                    block
                })
                .collect()
        }
        _ => {
            let sampler = PathSampler::new(spec, &times, Some(initial), config.sampling)?;
            blocks
                .par_iter()
                .map(|&(p0, p1)| {
                    let mut block = path.empty_block(config.output_times.len());
                    for pair in p0..p1 {
                        let (a, b) = sampler.draw_pair(config.seed, pair as u64);
                        for (k, d) in [a, b].into_iter().enumerate() {
                            if 2 * pair + k >= config.n_paths {
                                break;
                            }
                            let x0 = d.x0.expect("sampler built with an initial law");
                            let trace = path.rk4(x0.as_slice(), &d.noise);
                            path.accumulate(&mut block, trace);
                        }
                    }
                    block
                })
                .collect()
        }
    };

    let mut samples: Vec<Vec<f64>> = vec![Vec::new(); config.output_times.len()];
    let mut sums = Sums::zeros(times.len() * functionals.len());
    let (mut kept, mut diverged) = (0, 0);
    for block in &results {
        for (dst, src) in samples.iter_mut().zip(&block.samples) {
            dst.extend_from_slice(src);
        }
        sums.merge(&block.sums);
        kept += block.kept;
        diverged += block.diverged;
    }
    if diverged > 0 {
        log::warn!("{diverged} of {} paths diverged and were excluded", config.n_paths);
    }
    if kept < 2 {
        return Err(Error::Parameter(format!("only {kept} paths stayed bounded")));
    }
    let nf = functionals.len();
    let kf = kept as f64;
    let mut mean = Vec::with_capacity(times.len());
    let mut stderr = Vec::with_capacity(times.len());
    for k in 0..times.len() {
        let mut m = Vec::with_capacity(nf);
        let mut e = Vec::with_capacity(nf);
        for q in 0..nf {
            let s1 = sums.s1[k * nf + q];
            let s2 = sums.s2[k * nf + q];
            let mu = s1 / kf;
            let var = ((s2 - s1 * mu) / (kf - 1.0)).max(0.0);
            m.push(mu);
            e.push((var / kf).sqrt());
        }
        mean.push(m);
        stderr.push(e);
    }
    Ok(McOutput {
        dim: n,
        output_times: config.output_times.clone(),
        samples,
        n_kept: kept,
        diverged,
        trace: MomentTrace {
            times,
            functionals,
            mean,
            stderr,
        },
    })
}

/// Sampler of the initial law alone, for white-noise runs.
fn initial_sampler(law: &GaussianLaw) -> impl Fn(&mut ChaCha8Rng) -> Vec<f64> + Sync + '_ {
    let eig = SymmetricEigen::new(law.cov.clone());
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    move |rng: &mut ChaCha8Rng| {
        let z = DVector::from_fn(law.dim(), |_, _| StandardNormal.sample(rng));
        (&law.mean + &root * z).iter().copied().collect()
    }
}

struct PathIntegrator<'a> {
    model: &'a dyn SystemModel,
    spec: &'a ExcitationSpec,
    times: &'a [f64],
    substeps: usize,
    functionals: &'a [Monomial],
    output_index: &'a [usize],
}

impl PathIntegrator<'_> {
    fn empty_block(&self, n_out: usize) -> BlockResult {
        BlockResult {
            samples: vec![Vec::new(); n_out],
            kept: 0,
            diverged: 0,
            sums: Sums::zeros(self.times.len() * self.functionals.len()),
        }
    }

    /// States at every excitation grid time, or `None` if the path diverged.
    fn rk4(&self, x0: &[f64], noise: &[f64]) -> Option<Vec<f64>> {
        let n = x0.len();
        let b = &self.spec.forcing;
        let mut x = x0.to_vec();
        let mut trace = Vec::with_capacity(self.times.len() * n);
        trace.extend_from_slice(&x);
        let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        let mut tmp = vec![0.0; n];
        let rhs = |x: &[f64], t: f64, xi: f64, out: &mut [f64]| {
            self.model.drift(x, t, out);
            let e = self.spec.mean_at(t) + xi;
            for (o, bi) in out.iter_mut().zip(b) {
                *o += bi * e;
            }
        };
        for k in 0..self.times.len() - 1 {
            let (ta, tb) = (self.times[k], self.times[k + 1]);
            let (na, nb) = (noise[k], noise[k + 1]);
            let dt = (tb - ta) / self.substeps as f64;
            let xi = |t: f64| na + (nb - na) * (t - ta) / (tb - ta);
            for s in 0..self.substeps {
                let t = ta + s as f64 * dt;
                let tm = t + 0.5 * dt;
                let te = if s + 1 == self.substeps { tb } else { t + dt };
                rhs(&x, t, xi(t), &mut k1);
                for i in 0..n {
                    tmp[i] = x[i] + 0.5 * dt * k1[i];
                }
                rhs(&tmp, tm, xi(tm), &mut k2);
                for i in 0..n {
                    tmp[i] = x[i] + 0.5 * dt * k2[i];
                }
                rhs(&tmp, tm, xi(tm), &mut k3);
                for i in 0..n {
                    tmp[i] = x[i] + dt * k3[i];
                }
                rhs(&tmp, te, xi(te), &mut k4);
                for i in 0..n {
                    x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
            if diverged(&x) {
                return None;
            }
            trace.extend_from_slice(&x);
        }
        Some(trace)
    }

    /// Euler–Maruyama under white noise of intensity `D(t)` (covariance `2Dδ`).
    fn euler_maruyama(&self, x0: &[f64], intensity: impl Fn(f64) -> f64, rng: &mut ChaCha8Rng) -> Option<Vec<f64>> {
        let n = x0.len();
        let b = &self.spec.forcing;
        let mut x = x0.to_vec();
        let mut drift = vec![0.0; n];
        let mut trace = Vec::with_capacity(self.times.len() * n);
        trace.extend_from_slice(&x);
        for k in 0..self.times.len() - 1 {
            let (ta, tb) = (self.times[k], self.times[k + 1]);
            let dt = (tb - ta) / self.substeps as f64;
            for s in 0..self.substeps {
                let t = ta + s as f64 * dt;
                self.model.drift(&x, t, &mut drift);
                let z: f64 = StandardNormal.sample(rng);
                let dw = (2.0 * intensity(t) * dt).sqrt() * z;
                let m = self.spec.mean_at(t) * dt;
                for i in 0..n {
                    x[i] += drift[i] * dt + b[i] * (m + dw);
                }
            }
            if diverged(&x) {
                return None;
            }
            trace.extend_from_slice(&x);
        }
        Some(trace)
    }

    fn accumulate(&self, block: &mut BlockResult, trace: Option<Vec<f64>>) {
        let Some(trace) = trace else {
            block.diverged += 1;
            return;
        };
        let n = trace.len() / self.times.len();
        let nf = self.functionals.len();
        for (k, x) in trace.chunks_exact(n).enumerate() {
            for (q, f) in self.functionals.iter().enumerate() {
                let v = f.eval(x);
                block.sums.s1[k * nf + q] += v;
                block.sums.s2[k * nf + q] += v * v;
            }
        }
        for (dst, &k) in block.samples.iter_mut().zip(self.output_index) {
            dst.extend_from_slice(&trace[k * n..(k + 1) * n]);
        }
        block.kept += 1;
    }
}

fn diverged(x: &[f64]) -> bool {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    !(norm <= DIVERGENCE_NORM)
}

/// How a sample is assigned to grid nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Binning {
    /// Whole count to the nearest node.
    Nearest,
    /// Count split bilinearly over the four surrounding nodes, i.e. the
    /// projection onto the grid's hat functions.
    #[default]
    Linear,
}

/// Bin assignment and optional smoothing of a density estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Estimator {
    pub binning: Binning,
    pub smoothing: Smoothing,
}

/// Optional smoothing applied on top of the bin counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    #[default]
    None,
    /// Separable Gaussian kernel with Silverman's bandwidth `σ_i n^{-1/6}`.
    Silverman,
}

#[derive(Debug, Clone)]
pub struct DensityEstimate {
    pub field: PdfField,
    pub n_samples: usize,
    pub outside: usize,
    pub estimator: Estimator,
    pub bandwidth: Option<[f64; 2]>,
}

/// Histogram of two-dimensional samples (row-major pairs) over the control
/// volumes of `grid`, normalised to unit mass over the samples that fall
/// inside.
pub fn density_estimate(samples: &[f64], grid: &GridSpec, t: f64, estimator: Estimator) -> Result<DensityEstimate> {
    grid.validate()?;
    if !samples.len().is_multiple_of(2) {
        return Err(Error::Parameter("samples must be (x1, x2) pairs".into()));
    }
    let n = samples.len() / 2;
    if n < MIN_PATHS {
        return Err(Error::Parameter(format!(
            "{n} samples is below the minimum of {MIN_PATHS}"
        )));
    }
    let mut counts = vec![0.0; grid.len()];
    let mut outside = 0;
    for x in samples.chunks_exact(2) {
        let placed = match estimator.binning {
            Binning::Nearest => grid.nearest(x).map(|k| counts[k] += 1.0),
            Binning::Linear => linear_bin(grid, x, &mut counts),
        };
        if placed.is_none() {
            outside += 1;
        }
    }
    if outside as f64 > OUTSIDE_WARN_FRACTION * n as f64 {
        log::warn!("{outside} of {n} samples fall outside the grid");
    }
    let inside = n - outside;
    if inside == 0 {
        return Err(Error::GridMismatch("no samples inside the grid".into()));
    }
    let bandwidth = match estimator.smoothing {
        Smoothing::None => None,
        Smoothing::Silverman => {
            let factor = (n as f64).powf(-1.0 / 6.0);
            let mut bw = [0.0; 2];
            for (axis, b) in bw.iter_mut().enumerate() {
                let (s1, s2) = samples
                    .chunks_exact(2)
                    .fold((0.0, 0.0), |(a, q), x| (a + x[axis], q + x[axis] * x[axis]));
                let mu = s1 / n as f64;
                let var = ((s2 - s1 * mu) / (n as f64 - 1.0)).max(0.0);
                *b = var.sqrt() * factor;
            }
            counts = smooth(&counts, grid, bw);
            Some(bw)
        }
    };
    let total: f64 = counts.iter().sum();
    let values: Vec<f64> = counts
        .iter()
        .enumerate()
        .map(|(k, c)| c / (total * grid.volume(k)))
        .collect();
    Ok(DensityEstimate {
        field: PdfField::new(grid.clone(), values, t)?,
        n_samples: n,
        outside,
        estimator,
        bandwidth,
    })
}

fn linear_bin(grid: &GridSpec, x: &[f64], counts: &mut [f64]) -> Option<()> {
    let mut base = [0usize; 2];
    let mut frac = [0.0; 2];
    for d in 0..2 {
        let u = (x[d] - grid.lo[d]) / grid.spacing(d);
        let last = (grid.nodes[d] - 1) as f64;
        if !(u >= 0.0 && u <= last) {
            return None;
        }
        let i = u.floor().min(last - 1.0);
        base[d] = i as usize;
        frac[d] = u - i;
    }
    let [i, j] = base;
    let [a, b] = frac;
    counts[grid.index(i, j)] += (1.0 - a) * (1.0 - b);
    counts[grid.index(i + 1, j)] += a * (1.0 - b);
    counts[grid.index(i, j + 1)] += (1.0 - a) * b;
    counts[grid.index(i + 1, j + 1)] += a * b;
    Some(())
}

/// Separable Gaussian convolution of node masses; each source node spreads
/// its mass over the grid with weights normalised to one, so total mass is kept.
fn smooth(mass: &[f64], grid: &GridSpec, bw: [f64; 2]) -> Vec<f64> {
    let [n1, n2] = grid.nodes;
    let weights = |axis: usize, len: usize| -> Vec<Vec<f64>> {
        let h = grid.spacing(axis);
        (0..len)
            .map(|src| {
                let mut w: Vec<f64> = (0..len)
                    .map(|dst| {
                        if bw[axis] == 0.0 {
                            if dst == src {
                                1.0
                            } else {
                                0.0
                            }
                        } else {
                            let u = (dst as f64 - src as f64) * h / bw[axis];
                            (-0.5 * u * u).exp()
                        }
                    })
                    .collect();
                let s: f64 = w.iter().sum();
                w.iter_mut().for_each(|v| *v /= s);
                w
            })
            .collect()
    };
    let w1 = weights(0, n1);
    let w2 = weights(1, n2);
    let mut tmp = vec![0.0; mass.len()];
    for i in 0..n1 {
        for j in 0..n2 {
            let m = mass[grid.index(i, j)];
            if m != 0.0 {
                for (jj, w) in w2[j].iter().enumerate() {
                    tmp[grid.index(i, jj)] += m * w;
                }
            }
        }
    }
    let mut out = vec![0.0; mass.len()];
    for i in 0..n1 {
        for j in 0..n2 {
            let m = tmp[grid.index(i, j)];
            if m != 0.0 {
                for (ii, w) in w1[i].iter().enumerate() {
                    out[grid.index(ii, j)] += m * w;
                }
            }
        }
    }
    out
}

/// Sample mean of `functional` over row-major samples of dimension `dim`, with
/// standard error `sd / √n`.
pub fn moment_estimate(samples: &[f64], dim: usize, functional: impl Fn(&[f64]) -> f64) -> Result<(f64, f64)> {
    if dim == 0 || !samples.len().is_multiple_of(dim) {
        return Err(Error::Parameter(
            "sample length is not a multiple of the dimension".into(),
        ));
    }
    let n = samples.len() / dim;
    if n < 2 {
        return Err(Error::Parameter("at least two samples are needed".into()));
    }
    let values: Vec<f64> = samples.chunks_exact(dim).map(&functional).collect();
    // shift by the first value so constant samples give exact results
    let shift = values[0];
    let mean = shift + values.iter().map(|v| v - shift).sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, (var / n as f64).sqrt()))
}
