//! Uniform tensor grids in the state plane and densities sampled on them.
//!
//! Every node owns a control volume equal to its trapezoid weight, so the
//! discrete mass `Σ V_k f_k` is the trapezoid rule.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{Monomial, SystemModel};
use crate::error::{Error, Result};

/// Fewest nodes allowed per axis.
pub const MIN_NODES: usize = 41;

/// Uniform 2D grid, node `(i, j)` at `(lo₁ + i h₁, lo₂ + j h₂)`, flattened as
/// `i n₂ + j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub nodes: [usize; 2],
}

impl GridSpec {
    pub fn new(lo: [f64; 2], hi: [f64; 2], nodes: [usize; 2]) -> Result<Self> {
        let g = Self { lo, hi, nodes };
        g.validate()?;
        Ok(g)
    }

    /// Square grid `[-half, half]²` with `n` nodes per axis.
    pub fn square(half: f64, n: usize) -> Result<Self> {
        Self::new([-half, -half], [half, half], [n, n])
    }

    pub fn validate(&self) -> Result<()> {
        for d in 0..2 {
            if self.nodes[d] < MIN_NODES {
                return Err(Error::Parameter(format!(
                    "grid axis {} has {} nodes (at least {MIN_NODES} required)",
                    d + 1,
                    self.nodes[d]
                )));
            }
            if !(self.hi[d] > self.lo[d]) || !self.lo[d].is_finite() || !self.hi[d].is_finite() {
                return Err(Error::Parameter(format!(
                    "grid axis {} has empty extent [{}, {}]",
                    d + 1,
                    self.lo[d],
                    self.hi[d]
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nodes[0] * self.nodes[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / (self.nodes[axis] - 1) as f64
    }

    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        if i + 1 == self.nodes[axis] {
            self.hi[axis]
        } else {
            self.lo[axis] + i as f64 * self.spacing(axis)
        }
    }

    pub fn axis(&self, axis: usize) -> Vec<f64> {
        (0..self.nodes[axis]).map(|i| self.coord(axis, i)).collect()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.nodes[1] + j
    }

    pub fn point(&self, k: usize) -> [f64; 2] {
        let (i, j) = (k / self.nodes[1], k % self.nodes[1]);
        [self.coord(0, i), self.coord(1, j)]
    }

    /// All node coordinates, row-major `[x₁, x₂, x₁, x₂, …]`.
    pub fn points(&self) -> Vec<f64> {
        (0..self.len()).flat_map(|k| self.point(k)).collect()
    }

    /// Trapezoid weight of node `i` along `axis`.
    #[inline]
    pub fn weight(&self, axis: usize, i: usize) -> f64 {
        let h = self.spacing(axis);
        if i == 0 || i + 1 == self.nodes[axis] {
            0.5 * h
        } else {
            h
        }
    }

    /// Control volume of node `k`.
    pub fn volume(&self, k: usize) -> f64 {
        let (i, j) = (k / self.nodes[1], k % self.nodes[1]);
        self.weight(0, i) * self.weight(1, j)
    }

    pub fn volumes(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.volume(k)).collect()
    }

    /// Node nearest to `x`, or `None` outside the grid.
    pub fn nearest(&self, x: &[f64]) -> Option<usize> {
        let mut ij = [0usize; 2];
        for d in 0..2 {
            let u = (x[d] - self.lo[d]) / self.spacing(d);
            // control volumes stop at the domain edge
            if !(u >= 0.0) || u > (self.nodes[d] - 1) as f64 {
                return None;
            }
            ij[d] = (u.round().max(0.0) as usize).min(self.nodes[d] - 1);
        }
        Some(self.index(ij[0], ij[1]))
    }
}

/// One-dimensional density on a grid axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginal {
    pub axis: usize,
    pub x: Vec<f64>,
    pub f: Vec<f64>,
}

impl Marginal {
    pub fn mass(&self) -> f64 {
        crate::quadrature::trapezoid_weights(&self.x)
            .iter()
            .zip(&self.f)
            .map(|(w, f)| w * f)
            .sum()
    }

    /// Trapezoid `∫ |f − g|` on a shared axis.
    pub fn l1(&self, other: &Marginal) -> Result<f64> {
        if self.x.len() != other.x.len() || self.axis != other.axis {
            return Err(Error::GridMismatch("marginals live on different axes".into()));
        }
        Ok(crate::quadrature::trapezoid_weights(&self.x)
            .iter()
            .zip(self.f.iter().zip(&other.f))
            .map(|(w, (a, b))| w * (a - b).abs())
            .sum())
    }

    /// Location and value of the peak.
    pub fn peak(&self) -> (f64, f64) {
        let (k, v) = self.f.iter().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc },
        );
        (self.x[k], v)
    }
}

/// Density values on a grid at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct PdfField {
    pub grid: GridSpec,
    pub values: Vec<f64>,
    pub t: f64,
}

impl PdfField {
    pub fn new(grid: GridSpec, values: Vec<f64>, t: f64) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} values for a grid of {} nodes",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, values, t })
    }

    /// Gaussian `N(mean, cov)` sampled on the grid and normalised to unit
    /// discrete mass.
    pub fn gaussian(grid: &GridSpec, mean: &[f64], cov: &DMatrix<f64>, t: f64) -> Result<Self> {
        let inv = cov
            .clone()
            .try_inverse()
            .filter(|_| cov[(0, 0)] > 0.0 && cov.determinant() > 0.0)
            .ok_or_else(|| Error::Parameter("initial covariance must be positive definite".into()))?;
        let values = (0..grid.len())
            .map(|k| {
                let p = grid.point(k);
                let d = DVector::from_vec(vec![p[0] - mean[0], p[1] - mean[1]]);
                (-0.5 * (d.transpose() * &inv * &d)[(0, 0)]).exp()
            })
            .collect();
        let mut f = Self::new(grid.clone(), values, t)?;
        let m = f.mass();
        f.values.iter_mut().for_each(|v| *v /= m);
        Ok(f)
    }

    /// Samples `g` at every node (no normalisation).
    pub fn from_fn<F: Fn(f64, f64) -> f64>(grid: &GridSpec, t: f64, g: F) -> Self {
        let values = (0..grid.len())
            .map(|k| {
                let p = grid.point(k);
                g(p[0], p[1])
            })
            .collect();
        Self {
            grid: grid.clone(),
            values,
            t,
        }
    }

    pub fn integrate<F: Fn(f64, f64) -> f64>(&self, g: F) -> f64 {
        let n2 = self.grid.nodes[1];
        let mut total = 0.0;
        for i in 0..self.grid.nodes[0] {
            let x1 = self.grid.coord(0, i);
            let w1 = self.grid.weight(0, i);
            let mut row = 0.0;
            for j in 0..n2 {
                let v = self.values[i * n2 + j];
                if v != 0.0 {
                    row += self.grid.weight(1, j) * v * g(x1, self.grid.coord(1, j));
                }
            }
            total += w1 * row;
        }
        total
    }

    pub fn mass(&self) -> f64 {
        self.integrate(|_, _| 1.0)
    }

    /// Trapezoid quadrature of the monomial against the density.
    pub fn moment(&self, m: &Monomial) -> f64 {
        self.integrate(|a, b| m.eval(&[a, b]))
    }

    pub fn mean(&self) -> [f64; 2] {
        let m = self.mass();
        [self.integrate(|a, _| a) / m, self.integrate(|_, b| b) / m]
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let m = self.mass();
        let mu = self.mean();
        let c11 = self.integrate(|a, _| (a - mu[0]).powi(2)) / m;
        let c22 = self.integrate(|_, b| (b - mu[1]).powi(2)) / m;
        let c12 = self.integrate(|a, b| (a - mu[0]) * (b - mu[1])) / m;
        DMatrix::from_row_slice(2, 2, &[c11, c12, c12, c22])
    }

    /// `R = ∫ J^h(x, t) f(x) dx` by quadrature.
    pub fn mean_jacobian(&self, model: &dyn SystemModel, t: f64) -> DMatrix<f64> {
        let n = model.dim();
        let mut acc = DMatrix::zeros(n, n);
        for k in 0..self.grid.len() {
            let v = self.values[k];
            if v != 0.0 {
                acc += model.jacobian(&self.grid.point(k), t) * (v * self.grid.volume(k));
            }
        }
        acc
    }

    /// Density of one coordinate, integrating the other out by trapezoid.
    pub fn marginal(&self, axis: usize) -> Marginal {
        let [n1, n2] = self.grid.nodes;
        let other = 1 - axis;
        let f = (0..self.grid.nodes[axis])
            .map(|a| {
                (0..self.grid.nodes[other])
                    .map(|b| {
                        let (i, j) = if axis == 0 { (a, b) } else { (b, a) };
                        debug_assert!(i < n1 && j < n2);
                        self.grid.weight(other, b) * self.values[i * n2 + j]
                    })
                    .sum()
            })
            .collect();
        Marginal {
            axis,
            x: self.grid.axis(axis),
            f,
        }
    }

    /// Trapezoid `∫ |f − g|` over the joint grid.
    pub fn l1(&self, other: &PdfField) -> Result<f64> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch("densities live on different grids".into()));
        }
        Ok((0..self.grid.len())
            .map(|k| self.grid.volume(k) * (self.values[k] - other.values[k]).abs())
            .sum())
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest boundary value relative to the peak.
    pub fn boundary_ratio(&self) -> f64 {
        let [n1, n2] = self.grid.nodes;
        let mut edge: f64 = 0.0;
        for i in 0..n1 {
            edge = edge.max(self.values[i * n2]).max(self.values[i * n2 + n2 - 1]);
        }
        for j in 0..n2 {
            edge = edge.max(self.values[j]).max(self.values[(n1 - 1) * n2 + j]);
        }
        let peak = self.max();
        if peak > 0.0 {
            edge / peak
        } else {
            0.0
        }
    }

    pub fn normalize(&mut self) {
        let m = self.mass();
        if m > 0.0 {
            self.values.iter_mut().for_each(|v| *v /= m);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(a: f64, b: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[a, 0.0, 0.0, b])
    }

    #[test]
    fn rejects_coarse_grids() {
        assert!(GridSpec::square(3.0, 40).is_err());
        assert!(GridSpec::square(3.0, 41).is_ok());
        assert!(GridSpec::new([1.0, 0.0], [1.0, 1.0], [41, 41]).is_err());
    }

    #[test]
    fn volumes_sum_to_area() {
        let g = GridSpec::new([-1.0, 0.0], [2.0, 0.5], [41, 61]).unwrap();
        let total: f64 = g.volumes().iter().sum();
        assert!((total - 1.5).abs() < 1e-12);
        assert_eq!(g.coord(0, 40), 2.0);
    }

    #[test]
    fn gaussian_moments() {
        let g = GridSpec::square(5.0, 101).unwrap();
        let f = PdfField::gaussian(&g, &[0.0, 0.0], &diag(0.3, 0.5), 0.0).unwrap();
        assert!((f.mass() - 1.0).abs() < 1e-14);
        let x1sq = Monomial::axis_power(2, 0, 2);
        assert!((f.moment(&x1sq) - 0.3).abs() < 1e-4);
        assert!((f.moment(&Monomial::one(2)) - f.mass()).abs() < 1e-15);
    }

    #[test]
    fn narrow_gaussian_moment_concentrates() {
        let g = GridSpec::new([1.0, -1.0], [3.0, 1.0], [201, 41]).unwrap();
        let f = PdfField::gaussian(&g, &[2.0, 0.0], &diag(1e-4, 0.05), 0.0).unwrap();
        assert!((f.moment(&Monomial::axis_power(2, 0, 2)) - 4.0).abs() < 1e-3);
    }

    #[test]
    fn marginal_of_product_gaussian() {
        let g = GridSpec::square(6.0, 121).unwrap();
        let (s1, s2) = (0.4f64, 0.9f64);
        let f = PdfField::from_fn(&g, 0.0, |a, b| {
            let g1 = (-a * a / (2.0 * s1)).exp() / (2.0 * std::f64::consts::PI * s1).sqrt();
            let g2 = (-b * b / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2).sqrt();
            g1 * g2
        });
        let m = f.marginal(0);
        for (x, v) in m.x.iter().zip(&m.f) {
            let exact = (-x * x / (2.0 * s1)).exp() / (2.0 * std::f64::consts::PI * s1).sqrt();
            assert!((v - exact).abs() < 1e-6);
        }
        assert!((m.mass() - f.mass()).abs() < 1e-12);
        assert!((f.marginal(1).mass() - f.mass()).abs() < 1e-12);
    }

    #[test]
    fn mean_and_covariance_of_correlated_gaussian() {
        let g = GridSpec::square(6.0, 121).unwrap();
        let c = DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.2, 0.4]);
        let f = PdfField::gaussian(&g, &[0.3, -0.2], &c, 0.0).unwrap();
        let m = f.mean();
        assert!((m[0] - 0.3).abs() < 1e-8 && (m[1] + 0.2).abs() < 1e-8);
        assert!((f.covariance() - c).amax() < 1e-6);
    }

    #[test]
    fn quadrature_mean_jacobian_matches_moment_form() {
        let model = crate::dynamics::Duffing::new(0.5).unwrap();
        let g = GridSpec::square(4.0, 81).unwrap();
        let f = PdfField::gaussian(&g, &[0.0, 0.0], &diag(0.3, 0.3), 0.0).unwrap();
        let m2 = f.moment(&Monomial::axis_power(2, 0, 2));
        let r = crate::dynamics::mean_jacobian(&model, &[m2], 0.0).unwrap();
        assert!((f.mean_jacobian(&model, 0.0) - r).amax() < 1e-12);
    }

    #[test]
    fn nearest_node() {
        let g = GridSpec::square(1.0, 41).unwrap();
        assert_eq!(g.nearest(&[-1.0, -1.0]), Some(0));
        assert_eq!(g.nearest(&[1.0, 1.0]), Some(g.len() - 1));
        assert_eq!(g.nearest(&[1.2, 0.0]), None);
        assert_eq!(g.point(g.nearest(&[0.26, 0.0]).unwrap()), [0.25, 0.0]);
    }
}
