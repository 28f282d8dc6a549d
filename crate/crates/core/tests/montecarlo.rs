//! Monte Carlo estimates against independent references.

use nalgebra::{DMatrix, Matrix2};
use pdfevo::analytic::linear_gaussian_solution;
use pdfevo::dynamics::{Duffing, LinearOscillator};
use pdfevo::excitation::{ExcitationSpec, GaussianLaw, Kernel, TimeFunction};
use pdfevo::grid::GridSpec;
use pdfevo::montecarlo::{density_estimate, moment_estimate, simulate, Estimator, McConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Functional = Box<dyn Fn(&[f64]) -> f64>;

#[test]
fn standard_normal_histogram_l1() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    // 10⁵ points in the plane
    let samples: Vec<f64> = (0..200_000).map(|_| StandardNormal.sample(&mut rng)).collect();
    let grid = GridSpec::square(5.0, 41).unwrap();
    let est = density_estimate(&samples, &grid, 0.0, Estimator::default()).unwrap();
    assert!((est.field.mass() - 1.0).abs() < 1e-12);
    let exact: Vec<f64> = (0..grid.len())
        .map(|k| {
            let [a, b] = grid.point(k);
            (-(a * a + b * b) / 2.0).exp() / (2.0 * std::f64::consts::PI)
        })
        .collect();
    let l1: f64 = (0..grid.len())
        .map(|k| (est.field.values[k] - exact[k]).abs() * grid.volume(k))
        .sum();
    assert!(l1 <= 0.05, "L1 = {l1}");
}

fn reference_case() -> (LinearOscillator, ExcitationSpec, GaussianLaw) {
    let osc = LinearOscillator {
        zeta: 0.25,
        omega0: 1.0,
    };
    // τ_cor = 2 for the OU kernel with timescale 2
    let kernel = Kernel::OrnsteinUhlenbeck {
        variance: 1.0,
        timescale: 2.0,
    };
    let spec = ExcitationSpec::oscillator(kernel, TimeFunction::Constant { value: 0.5 }).unwrap();
    let law = GaussianLaw::new(vec![-1.0, -1.0], DMatrix::identity(2, 2) * 0.15);
    (osc, spec, law)
}

#[test]
fn linear_oscillator_moments_match_gaussian_solution() {
    let (osc, spec, law) = reference_case();
    let config = McConfig {
        n_paths: 20_000,
        output_times: vec![2.0, 15.0],
        seed: 1,
        ..Default::default()
    };
    let out = simulate(&osc, &spec, &law, &config).unwrap();
    assert_eq!(out.diverged, 0);
    for &t in &[2.0, 15.0] {
        let (m, c) = linear_gaussian_solution(&osc, &spec, &law, t).unwrap();
        let second: Matrix2<f64> = c + m * m.transpose();
        let s = out.samples_at(t).unwrap();
        let checks: [(&str, Functional, f64); 5] = [
            ("x1", Box::new(|x| x[0]), m[0]),
            ("x2", Box::new(|x| x[1]), m[1]),
            ("x1^2", Box::new(|x| x[0] * x[0]), second[(0, 0)]),
            ("x1*x2", Box::new(|x| x[0] * x[1]), second[(0, 1)]),
            ("x2^2", Box::new(|x| x[1] * x[1]), second[(1, 1)]),
        ];
        for (name, f, expected) in checks.iter() {
            let (v, e) = moment_estimate(s, 2, f).unwrap();
            assert!(
                (v - expected).abs() <= 3.0 * e,
                "t = {t}, {name}: {v} vs {expected} (stderr {e})"
            );
        }
    }
}

fn duffing_spec(shape: f64) -> ExcitationSpec {
    let kernel = Kernel::GaussianFilter {
        variance: 0.36,
        shape,
        peak_freq: 2.5,
    };
    ExcitationSpec::oscillator(kernel, TimeFunction::Zero).unwrap()
}

#[test]
fn rk4_self_convergence() {
    let model = Duffing::new(0.5).unwrap();
    let spec = duffing_spec(1.5);
    let law = GaussianLaw::new(vec![0.0, 0.0], DMatrix::identity(2, 2) * 0.3);
    let base = McConfig {
        n_paths: 1000,
        dt: 0.005,
        noise_dt: 0.01,
        output_times: vec![5.0],
        seed: 4,
        ..Default::default()
    };
    let fine = McConfig {
        dt: 0.0025,
        ..base.clone()
    };
    let a = simulate(&model, &spec, &law, &base).unwrap();
    let b = simulate(&model, &spec, &law, &fine).unwrap();
    let max = a.samples[0]
        .iter()
        .zip(&b.samples[0])
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(max <= 1e-6, "max change {max}");
}

#[test]
fn nonzero_mean_drives_mass_to_the_right_well() {
    let model = Duffing::new(0.5).unwrap();
    let kernel = Kernel::GaussianFilter {
        variance: 0.36,
        shape: 0.6,
        peak_freq: 2.5,
    };
    let spec = ExcitationSpec::oscillator(
        kernel,
        TimeFunction::Logistic {
            amplitude: 0.5,
            rate: 6.0,
            midpoint: 1.0,
        },
    )
    .unwrap();
    let law = GaussianLaw::new(vec![-0.5, -0.5], DMatrix::identity(2, 2) * 0.3);
    let config = McConfig {
        n_paths: 10_000,
        output_times: vec![20.0],
        seed: 8,
        ..Default::default()
    };
    let out = simulate(&model, &spec, &law, &config).unwrap();
    assert_eq!(out.diverged, 0);
    let (m, e) = moment_estimate(out.samples_at(20.0).unwrap(), 2, |x| x[0]).unwrap();
    assert!(m - 3.0 * e > 0.0, "mean position {m} ± {e}");
}

#[test]
fn stationary_second_moment_is_stable_across_seeds() {
    let model = Duffing::new(0.5).unwrap();
    let spec = duffing_spec(0.6);
    let law = GaussianLaw::new(vec![0.0, 0.0], DMatrix::identity(2, 2) * 0.3);
    let run = |seed| {
        let config = McConfig {
            n_paths: 10_000,
            output_times: vec![15.0],
            seed,
            ..Default::default()
        };
        let out = simulate(&model, &spec, &law, &config).unwrap();
        moment_estimate(out.samples_at(15.0).unwrap(), 2, |x| x[0] * x[0]).unwrap()
    };
    let (a, ea) = run(21);
    let (b, eb) = run(22);
    let joint = (ea * ea + eb * eb).sqrt();
    assert!((a - b).abs() <= 3.0 * joint, "{a} vs {b} (joint stderr {joint})");
}

#[test]
fn trace_agrees_with_recorded_samples() {
    let model = Duffing::new(0.5).unwrap();
    let spec = duffing_spec(1.5);
    let law = GaussianLaw::new(vec![0.1, 0.0], DMatrix::identity(2, 2) * 0.3);
    let config = McConfig {
        n_paths: 2000,
        output_times: vec![0.5, 1.5],
        seed: 2,
        ..Default::default()
    };
    let out = simulate(&model, &spec, &law, &config).unwrap();
    let q = out
        .trace
        .position(&pdfevo::dynamics::Monomial::axis_power(2, 0, 2))
        .unwrap();
    let k = out.trace.times.iter().position(|t| (t - 1.5).abs() < 1e-9).unwrap();
    let (v, e) = moment_estimate(out.samples_at(1.5).unwrap(), 2, |x| x[0] * x[0]).unwrap();
    assert!((out.trace.mean[k][q] - v).abs() < 1e-12);
    assert!((out.trace.stderr[k][q] - e).abs() < 1e-9);
    assert!((out.trace.mean[0][0] - 0.1).abs() < 0.05);
}
