//! Distances between two densities on the same grid.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::PdfField;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginalMetrics {
    pub axis: usize,
    pub l1: f64,
    /// `(location, value)` of the first density's peak.
    pub peak_a: (f64, f64),
    pub peak_b: (f64, f64),
    /// `peak_a.1 / peak_b.1`.
    pub peak_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldComparison {
    pub t: f64,
    pub joint_l1: f64,
    pub marginals: Vec<MarginalMetrics>,
    pub mean_a: [f64; 2],
    pub mean_b: [f64; 2],
    /// `mean_a − mean_b`.
    pub mean_diff: [f64; 2],
    /// Row-major `cov_a − cov_b`.
    pub cov_diff: [f64; 4],
}

impl FieldComparison {
    pub fn max_marginal_l1(&self) -> f64 {
        self.marginals.iter().map(|m| m.l1).fold(0.0, f64::max)
    }
}

/// Joint and marginal distances, peaks and moment differences of `a` relative to `b`.
pub fn compare_fields(a: &PdfField, b: &PdfField) -> Result<FieldComparison> {
    if a.grid != b.grid {
        return Err(Error::GridMismatch(format!("{:?} vs {:?}", a.grid, b.grid)));
    }
    if (a.t - b.t).abs() > 1e-9 * (1.0 + a.t.abs()) {
        return Err(Error::GridMismatch(format!("snapshot times {} and {}", a.t, b.t)));
    }
    let marginals = (0..2)
        .map(|axis| {
            let (ma, mb) = (a.marginal(axis), b.marginal(axis));
            let (peak_a, peak_b) = (ma.peak(), mb.peak());
            Ok(MarginalMetrics {
                axis,
                l1: ma.l1(&mb)?,
                peak_a,
                peak_b,
                peak_ratio: peak_a.1 / peak_b.1,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (mean_a, mean_b) = (a.mean(), b.mean());
    let (ca, cb) = (a.covariance(), b.covariance());
    let d = ca - cb;
    Ok(FieldComparison {
        t: a.t,
        joint_l1: a.l1(b)?,
        marginals,
        mean_a,
        mean_b,
        mean_diff: [mean_a[0] - mean_b[0], mean_a[1] - mean_b[1]],
        cov_diff: [d[(0, 0)], d[(0, 1)], d[(1, 0)], d[(1, 1)]],
    })
}
