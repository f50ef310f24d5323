//! Step 1: unconstrained Gaussian estimates of the field on a grid.

mod gp;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::Grid;

pub use gp::{fit_hyperparameters, gp_fit_predict, gp_fit_predict_diagonal, gp_prior, log_marginal_likelihood, KernelConfig, SearchConfig};

/// Covariance of a [`GaussianField`].
///
/// `BlockDiagonal` holds one `M × M` block per time slice; it is what a
/// slice-local update produces from a diagonal input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariance {
    Full(DMatrix<f64>),
    Diagonal(DVector<f64>),
    BlockDiagonal(Vec<DMatrix<f64>>),
}

impl Covariance {
    pub fn dim(&self) -> usize {
        match self {
            Covariance::Full(m) => m.nrows(),
            Covariance::Diagonal(d) => d.len(),
            Covariance::BlockDiagonal(b) => b.iter().map(|m| m.nrows()).sum(),
        }
    }

    pub fn diagonal(&self) -> DVector<f64> {
        match self {
            Covariance::Full(m) => m.diagonal(),
            Covariance::Diagonal(d) => d.clone(),
            Covariance::BlockDiagonal(b) => {
                DVector::from_iterator(self.dim(), b.iter().flat_map(|m| m.diagonal().iter().copied().collect::<Vec<_>>()))
            }
        }
    }

    /// Dense `N × N` matrix.
    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Covariance::Full(m) => m.clone(),
            Covariance::Diagonal(d) => DMatrix::from_diagonal(d),
            Covariance::BlockDiagonal(b) => {
                let n = self.dim();
                let mut out = DMatrix::zeros(n, n);
                let mut off = 0;
                for blk in b {
                    let k = blk.nrows();
                    out.view_mut((off, off), (k, k)).copy_from(blk);
                    off += k;
                }
                out
            }
        }
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().sum()
    }

    /// `Σ v`.
    pub fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Covariance::Full(m) => m * v,
            Covariance::Diagonal(d) => d.component_mul(v),
            Covariance::BlockDiagonal(b) => {
                let mut out = DVector::zeros(v.len());
                let mut off = 0;
                for blk in b {
                    let k = blk.nrows();
                    out.rows_mut(off, k).copy_from(&(blk * v.rows(off, k)));
                    off += k;
                }
                out
            }
        }
    }

    /// Covariance restricted to the index range `r`, which must not straddle
    /// blocks of a block-diagonal covariance.
    pub fn sub_block(&self, r: std::ops::Range<usize>) -> DMatrix<f64> {
        let k = r.len();
        match self {
            Covariance::Full(m) => m.view((r.start, r.start), (k, k)).into_owned(),
            Covariance::Diagonal(d) => DMatrix::from_diagonal(&d.rows(r.start, k).into_owned()),
            Covariance::BlockDiagonal(b) => {
                let mut off = 0;
                for blk in b {
                    let n = blk.nrows();
                    if r.start >= off && r.end <= off + n {
                        return blk.view((r.start - off, r.start - off), (k, k)).into_owned();
                    }
                    off += n;
                }
                self.to_dense().view((r.start, r.start), (k, k)).into_owned()
            }
        }
    }
}

/// `(A + Aᵀ)/2` in place.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for j in 0..n {
        for i in j + 1..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

const SYMMETRY_RTOL: f64 = 1e-12;

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Shape(format!("covariance is {}x{}", m.nrows(), m.ncols())));
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_RTOL * scale {
                return Err(Error::Range(format!("covariance not symmetric at ({i}, {j})")));
            }
        }
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Range("covariance has non-finite entries".into()));
    }
    Ok(())
}

/// Mean and covariance of a Gaussian over the flattened grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianField {
    grid: Grid,
    mean: DVector<f64>,
    cov: Covariance,
}

impl GaussianField {
    pub fn new(grid: Grid, mean: DVector<f64>, cov: Covariance) -> Result<Self> {
        let n = grid.len();
        if mean.len() != n || cov.dim() != n {
            return Err(Error::Shape(format!(
                "grid has {n} points, mean {} and covariance {}",
                mean.len(),
                cov.dim()
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::Range("mean has non-finite entries".into()));
        }
        match &cov {
            Covariance::Full(m) => check_symmetric(m)?,
            Covariance::Diagonal(d) => {
                if d.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                    return Err(Error::Range("diagonal variances must be finite and >= 0".into()));
                }
            }
            Covariance::BlockDiagonal(b) => {
                let m = grid.n_positions();
                if b.len() != grid.n_times() || b.iter().any(|blk| blk.nrows() != m) {
                    return Err(Error::Shape("block-diagonal covariance must have one MxM block per slice".into()));
                }
                for blk in b {
                    check_symmetric(blk)?;
                }
            }
        }
        Ok(GaussianField { grid, mean, cov })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &Covariance {
        &self.cov
    }

    pub fn into_parts(self) -> (Grid, DVector<f64>, Covariance) {
        (self.grid, self.mean, self.cov)
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn variances(&self) -> DVector<f64> {
        self.cov.diagonal()
    }

    pub fn slice_mean(&self, time_index: usize) -> Result<DVector<f64>> {
        self.grid.check_time_index(time_index)?;
        let r = self.grid.slice_range(time_index);
        Ok(self.mean.rows(r.start, r.len()).into_owned())
    }

    pub fn slice_variances(&self, time_index: usize) -> Result<DVector<f64>> {
        self.grid.check_time_index(time_index)?;
        let r = self.grid.slice_range(time_index);
        Ok(self.variances().rows(r.start, r.len()).into_owned())
    }

    /// Marginal of one time slice.
    pub fn slice(&self, time_index: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.grid.check_time_index(time_index)?;
        let r = self.grid.slice_range(time_index);
        Ok((self.mean.rows(r.start, r.len()).into_owned(), self.cov.sub_block(r)))
    }

    /// Marginal field of one time slice, on a single-time grid.
    pub fn marginal_slice(&self, time_index: usize) -> Result<GaussianField> {
        let (mean, cov) = self.slice(time_index)?;
        let grid = Grid::new(vec![self.grid.times()[time_index]], self.grid.positions().to_vec())?;
        GaussianField::new(grid, mean, Covariance::Full(cov))
    }

    /// Smallest eigenvalue relative to the largest; used to check the
    /// PSD invariant (`>= -1e-10`).
    pub fn min_relative_eigenvalue(&self) -> f64 {
        let eig = |m: DMatrix<f64>| {
            let e = m.symmetric_eigenvalues();
            (e.min(), e.max())
        };
        let (lo, hi) = match &self.cov {
            Covariance::Diagonal(d) => (d.min(), d.max()),
            Covariance::Full(m) => eig(m.clone()),
            Covariance::BlockDiagonal(b) => b.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), blk| {
                let (l, h) = eig(blk.clone());
                (lo.min(l), hi.max(h))
            }),
        };
        if hi <= 0.0 {
            if lo < 0.0 { -1.0 } else { 0.0 }
        } else {
            lo / hi
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextPoint {
    pub t: f64,
    pub x: f64,
    pub u: f64,
}

/// Scattered observations `D` with a common observation noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSet {
    points: Vec<ContextPoint>,
    noise_std: f64,
}

impl ContextSet {
    pub fn new(points: Vec<ContextPoint>, noise_std: f64) -> Result<Self> {
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return Err(Error::Range(format!("noise std {noise_std} must be >= 0")));
        }
        if points.iter().any(|p| !(p.t.is_finite() && p.x.is_finite() && p.u.is_finite())) {
            return Err(Error::Range("context values must be finite".into()));
        }
        Ok(ContextSet { points, noise_std })
    }

    /// Reject points outside `[0, t_max] × [x0, x1]`.
    pub fn check_domain(&self, t_max: f64, (x0, x1): (f64, f64)) -> Result<()> {
        for p in &self.points {
            if !(0.0..=t_max).contains(&p.t) || !(x0..=x1).contains(&p.x) {
                return Err(Error::Range(format!("context point ({}, {}) outside domain", p.t, p.x)));
            }
        }
        Ok(())
    }

    pub fn points(&self) -> &[ContextPoint] {
        &self.points
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn values(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.points.iter().map(|p| p.u))
    }

    /// First `n` points, for nested-context studies.
    pub fn truncated(&self, n: usize) -> Self {
        ContextSet {
            points: self.points[..n.min(self.len())].to_vec(),
            noise_std: self.noise_std,
        }
    }
}

/// Empirical Gaussian from an ensemble of mean predictions: samplewise mean
/// and unbiased variances on the diagonal.
pub fn ensemble_to_field(samples: &[DVector<f64>], grid: &Grid) -> Result<GaussianField> {
    if samples.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "ensemble needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let n = grid.len();
    if samples.iter().any(|s| s.len() != n) {
        return Err(Error::Shape(format!("ensemble members must have length {n}")));
    }
    let k = samples.len() as f64;
    let mean = samples.iter().fold(DVector::zeros(n), |acc, s| acc + s) / k;
    let var = samples
        .iter()
        .fold(DVector::zeros(n), |acc: DVector<f64>, s| acc + (s - &mean).map(|d| d * d))
        / (k - 1.0);
    GaussianField::new(grid.clone(), mean, Covariance::Diagonal(var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid() -> Grid {
        Grid::uniform((0.0, 1.0), 2, (0.0, 1.0), 3).unwrap()
    }

    #[test]
    fn ensemble_identical_members() {
        let v = DVector::from_vec(vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]);
        let f = ensemble_to_field(&[v.clone(), v.clone()], &grid()).unwrap();
        assert_eq!(f.mean(), &v);
        assert_eq!(f.variances(), DVector::zeros(6));
    }

    #[test]
    fn ensemble_zero_and_two() {
        let f = ensemble_to_field(&[DVector::zeros(6), DVector::from_element(6, 2.0)], &grid()).unwrap();
        assert_eq!(f.mean(), &DVector::from_element(6, 1.0));
        assert_eq!(f.variances(), DVector::from_element(6, 2.0));
    }

    #[test]
    fn ensemble_needs_two_members() {
        let r = ensemble_to_field(&[DVector::zeros(6)], &grid());
        assert!(matches!(r, Err(Error::InsufficientData(_))));
        let r = ensemble_to_field(&[DVector::zeros(6), DVector::zeros(5)], &grid());
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn field_shape_and_symmetry_checks() {
        let g = grid();
        assert!(GaussianField::new(g.clone(), DVector::zeros(5), Covariance::Diagonal(DVector::zeros(6))).is_err());
        let mut m = DMatrix::identity(6, 6);
        m[(0, 1)] = 0.1;
        assert!(GaussianField::new(g.clone(), DVector::zeros(6), Covariance::Full(m)).is_err());
        assert!(GaussianField::new(g, DVector::zeros(6), Covariance::Diagonal(DVector::from_element(6, -1.0))).is_err());
    }

    #[test]
    fn covariance_representations_agree() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.0, 0.2, 0.1, 0.2, 3.0]);
        let b = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.3, 0.0, 1.0, 0.0, 0.3, 0.0, 1.0]);
        let blocks = Covariance::BlockDiagonal(vec![a.clone(), b.clone()]);
        let dense = Covariance::Full(blocks.to_dense());
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_relative_eq!(blocks.mul_vec(&v), dense.mul_vec(&v), epsilon = 1e-14);
        assert_eq!(blocks.diagonal(), dense.diagonal());
        assert_eq!(blocks.sub_block(3..6), b);
        assert_eq!(dense.sub_block(0..3), a);
        let f = GaussianField::new(grid(), DVector::zeros(6), blocks).unwrap();
        assert_eq!(f.slice(1).unwrap().1, b);
    }
}
