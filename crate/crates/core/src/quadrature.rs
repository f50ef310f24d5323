//! Discrete integral operators on a time-major space-time grid.
//!
//! A [`Grid`] with `T` times and `M` positions flattens to `N = M·T` values,
//! slice `i` occupying columns `i·M .. (i+1)·M`. Each builder returns a
//! `T × N` matrix whose row `i` integrates slice `i` over Ω, so rows have
//! disjoint support.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pde::PdeInstance;

/// `n` evenly spaced points from `a` to `b`, endpoints exact.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![a],
        _ => {
            let h = (b - a) / (n - 1) as f64;
            let mut v: Vec<f64> = (0..n).map(|i| a + h * i as f64).collect();
            v[n - 1] = b;
            v
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    times: Vec<f64>,
    positions: Vec<f64>,
}

fn strictly_increasing(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite()) && v.windows(2).all(|w| w[0] < w[1])
}

impl Grid {
    pub fn new(times: Vec<f64>, positions: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::Shape("grid needs at least one time".into()));
        }
        if positions.len() < 2 {
            return Err(Error::Shape(format!(
                "grid needs at least two positions, got {}",
                positions.len()
            )));
        }
        if !strictly_increasing(&times) || !strictly_increasing(&positions) {
            return Err(Error::Range("grid coordinates must be finite and strictly increasing".into()));
        }
        Ok(Grid { times, positions })
    }

    /// `n_times` evenly spaced times on `[t0, t1]` and `n_positions` on `[x0, x1]`.
    pub fn uniform(
        (t0, t1): (f64, f64),
        n_times: usize,
        (x0, x1): (f64, f64),
        n_positions: usize,
    ) -> Result<Self> {
        let times = if n_times == 1 { vec![t1] } else { linspace(t0, t1, n_times) };
        Self::new(times, linspace(x0, x1, n_positions))
    }

    /// Evaluation grid covering a PDE instance's full window.
    pub fn for_instance(pde: &PdeInstance, n_times: usize, n_positions: usize) -> Result<Self> {
        Self::uniform((0.0, pde.time_horizon()), n_times, pde.space_domain(), n_positions)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn n_positions(&self) -> usize {
        self.positions.len()
    }

    /// Flattened length `N = M·T`.
    pub fn len(&self) -> usize {
        self.times.len() * self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flat index of `(time_index, position_index)`.
    pub fn index(&self, time_index: usize, position_index: usize) -> usize {
        time_index * self.positions.len() + position_index
    }

    /// Flat index range of one time slice.
    pub fn slice_range(&self, time_index: usize) -> std::ops::Range<usize> {
        let m = self.positions.len();
        time_index * m..(time_index + 1) * m
    }

    /// Time slice that owns flat index `i`.
    pub fn slice_of(&self, i: usize) -> usize {
        i / self.positions.len()
    }

    /// Interval widths `Δx_j = x_{j+1} - x_j`.
    pub fn spacings(&self) -> Vec<f64> {
        self.positions.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn domain_length(&self) -> f64 {
        self.positions[self.positions.len() - 1] - self.positions[0]
    }

    /// Flattened `(t, x)` pairs in storage order.
    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times
            .iter()
            .flat_map(move |&t| self.positions.iter().map(move |&x| (t, x)))
    }

    /// Evaluate `f(t, x)` at every grid point.
    pub fn evaluate<F>(&self, mut f: F) -> Result<DVector<f64>>
    where
        F: FnMut(f64, f64) -> Result<f64>,
    {
        let values = self.points().map(|(t, x)| f(t, x)).collect::<Result<Vec<_>>>()?;
        Ok(DVector::from_vec(values))
    }

    pub(crate) fn check_time_index(&self, time_index: usize) -> Result<()> {
        if time_index >= self.times.len() {
            return Err(Error::Index {
                index: time_index,
                len: self.times.len(),
            });
        }
        Ok(())
    }
}

/// Spatial integration rule used to discretize the conservation integral.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadratureRule {
    #[default]
    Trapezoid,
    LeftRiemann,
    RightRiemann,
}

impl QuadratureRule {
    pub fn build(self, grid: &Grid) -> DMatrix<f64> {
        match self {
            QuadratureRule::Trapezoid => build_trapezoid(grid),
            QuadratureRule::LeftRiemann => build_left_riemann(grid),
            QuadratureRule::RightRiemann => build_right_riemann(grid),
        }
    }
}

fn build_with_weights(grid: &Grid, weights: &[f64]) -> DMatrix<f64> {
    let (t, m) = (grid.n_times(), grid.n_positions());
    let mut g = DMatrix::zeros(t, t * m);
    for i in 0..t {
        for (j, &w) in weights.iter().enumerate() {
            g[(i, i * m + j)] = w;
        }
    }
    g
}

/// Trapezoid weights on one slice.
pub fn trapezoid_weights(positions: &[f64]) -> Vec<f64> {
    let m = positions.len();
    let mut w = vec![0.0; m];
    for j in 0..m - 1 {
        let h = positions[j + 1] - positions[j];
        w[j] += 0.5 * h;
        w[j + 1] += 0.5 * h;
    }
    w
}

/// Second-order trapezoidal rule: `Δx_1/2, (Δx_{j-1}+Δx_j)/2, …, Δx_{M-1}/2`.
pub fn build_trapezoid(grid: &Grid) -> DMatrix<f64> {
    build_with_weights(grid, &trapezoid_weights(grid.positions()))
}

/// First-order left Riemann sum; the last point of each slice gets weight 0.
pub fn build_left_riemann(grid: &Grid) -> DMatrix<f64> {
    let mut w = grid.spacings();
    w.push(0.0);
    build_with_weights(grid, &w)
}

/// First-order right Riemann sum; the first point of each slice gets weight 0.
pub fn build_right_riemann(grid: &Grid) -> DMatrix<f64> {
    let mut w = vec![0.0];
    w.extend(grid.spacings());
    build_with_weights(grid, &w)
}

const UNIFORM_RTOL: f64 = 1e-9;

fn uniform_spacing(grid: &Grid) -> Result<f64> {
    let h = grid.spacings();
    let h0 = h[0];
    if h.iter().any(|&hj| (hj - h0).abs() > UNIFORM_RTOL * h0) {
        return Err(Error::Unsupported(
            "second-difference penalty requires uniform spatial spacing".into(),
        ));
    }
    Ok(h0)
}

/// Three-point second difference on one slice: row `j` is
/// `(u_j - 2u_{j+1} + u_{j+2}) / Δx`, an `(M-2) × M` matrix.
///
/// The `1/Δx` (not `1/Δx²`) scaling is deliberate: the penalty strength is
/// carried by the per-row variances.
pub fn build_second_difference(grid: &Grid, time_index: usize) -> Result<DMatrix<f64>> {
    grid.check_time_index(time_index)?;
    let m = grid.n_positions();
    if m < 3 {
        return Err(Error::Shape(format!("second difference needs M >= 3, got {m}")));
    }
    let h = uniform_spacing(grid)?;
    let mut d = DMatrix::zeros(m - 2, m);
    for j in 0..m - 2 {
        d[(j, j)] = 1.0 / h;
        d[(j, j + 1)] = -2.0 / h;
        d[(j, j + 2)] = 1.0 / h;
    }
    Ok(d)
}

/// Second-difference penalty on the listed slices, embedded in the full
/// `N`-column space (block diagonal, `M-2` rows per slice).
pub fn build_second_difference_blocks(grid: &Grid, slices: &[usize]) -> Result<DMatrix<f64>> {
    let m = grid.n_positions();
    let mut out = DMatrix::zeros(slices.len() * m.saturating_sub(2), grid.len());
    for (k, &s) in slices.iter().enumerate() {
        let d = build_second_difference(grid, s)?;
        out.view_mut((k * (m - 2), s * m), (m - 2, m)).copy_from(&d);
    }
    Ok(out)
}

/// Variance of each second-difference row given per-point standard
/// deviations and a neighbour correlation `ρ`:
///
/// `σ_i² + 4σ_{i+1}² + σ_{i+2}² − 4ρ(σ_iσ_{i+1} + σ_{i+1}σ_{i+2}) + 2ρ²σ_iσ_{i+2}`
pub fn penalty_row_variance(sigmas: &[f64], rho: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Range(format!("correlation rho = {rho} outside [0, 1]")));
    }
    if sigmas.len() < 3 {
        return Err(Error::Shape(format!("need at least 3 sigmas, got {}", sigmas.len())));
    }
    if sigmas.iter().any(|s| !(*s >= 0.0)) {
        return Err(Error::Range("standard deviations must be non-negative".into()));
    }
    Ok(sigmas
        .windows(3)
        .map(|w| {
            let (a, b, c) = (w[0], w[1], w[2]);
            a * a + 4.0 * b * b + c * c - 4.0 * rho * (a * b + b * c) + 2.0 * rho * rho * a * c
        })
        .collect())
}

/// Probabilistic linear constraint `b = G u + σ_G ε` with unit-variance,
/// independent noise components.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraint {
    pub g: DMatrix<f64>,
    pub b: DVector<f64>,
    pub sigma_g: f64,
}

impl LinearConstraint {
    pub fn new(g: DMatrix<f64>, b: DVector<f64>, sigma_g: f64) -> Result<Self> {
        if g.nrows() != b.len() {
            return Err(Error::Shape(format!(
                "G has {} rows but b has length {}",
                g.nrows(),
                b.len()
            )));
        }
        if g.nrows() == 0 {
            return Err(Error::Shape("constraint has no rows".into()));
        }
        if !(sigma_g >= 0.0 && sigma_g.is_finite()) {
            return Err(Error::Range(format!("sigma_G = {sigma_g} must be >= 0")));
        }
        Ok(LinearConstraint { g, b, sigma_g })
    }

    /// Global conservation on every slice of `grid`, with `b(t)` taken from
    /// the exact conserved mass.
    pub fn conservation(
        pde: &PdeInstance,
        grid: &Grid,
        rule: QuadratureRule,
        sigma_g: f64,
    ) -> Result<Self> {
        let b = grid
            .times()
            .iter()
            .map(|&t| pde.conserved_mass(t))
            .collect::<Result<Vec<_>>>()?;
        Self::new(rule.build(grid), DVector::from_vec(b), sigma_g)
    }

    pub fn with_sigma(&self, sigma_g: f64) -> Result<Self> {
        Self::new(self.g.clone(), self.b.clone(), sigma_g)
    }

    pub fn n_rows(&self) -> usize {
        self.g.nrows()
    }

    /// Residual `G μ − b`.
    pub fn residual(&self, mean: &DVector<f64>) -> DVector<f64> {
        &self.g * mean - &self.b
    }

    /// Numerical rank of `G` from its singular values.
    pub fn rank(&self) -> usize {
        let sv = self.g.clone().svd(false, false).singular_values;
        let tol = sv.max() * (self.g.nrows().max(self.g.ncols()) as f64) * f64::EPSILON;
        sv.iter().filter(|&&s| s > tol).count()
    }
}

/// For each row of `g`, the single grid slice containing its support, or
/// `None` if some row spans several slices (or is empty).
pub(crate) fn row_slices(g: &DMatrix<f64>, grid: &Grid) -> Option<Vec<usize>> {
    if g.ncols() != grid.len() {
        return None;
    }
    (0..g.nrows())
        .map(|r| {
            let mut owner = None;
            for c in 0..g.ncols() {
                if g[(r, c)] != 0.0 {
                    let s = grid.slice_of(c);
                    match owner {
                        None => owner = Some(s),
                        Some(o) if o != s => return None,
                        _ => {}
                    }
                }
            }
            owner
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_grid(m: usize, t: usize) -> Grid {
        Grid::uniform((0.0, 1.0), t, (0.0, 1.0), m).unwrap()
    }

    #[test]
    fn three_point_rows() {
        let grid = unit_grid(3, 1);
        assert_eq!(build_trapezoid(&grid).as_slice(), &[0.25, 0.5, 0.25]);
        let left = build_left_riemann(&grid);
        assert_eq!((left[(0, 0)], left[(0, 1)], left[(0, 2)]), (0.5, 0.5, 0.0));
        let right = build_right_riemann(&grid);
        assert_eq!((right[(0, 0)], right[(0, 1)], right[(0, 2)]), (0.0, 0.5, 0.5));
    }

    #[test]
    fn constants_integrate_exactly() {
        let grid = Grid::new(vec![0.0, 0.5, 1.0], vec![-1.0, -0.2, 0.1, 0.7, 1.0]).unwrap();
        let ones = DVector::from_element(grid.len(), 1.0);
        for rule in [QuadratureRule::Trapezoid, QuadratureRule::LeftRiemann, QuadratureRule::RightRiemann] {
            let gu = rule.build(&grid) * &ones;
            for v in gu.iter() {
                assert_relative_eq!(*v, 2.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn trapezoid_is_mean_of_riemann_sums() {
        let grid = Grid::new(vec![0.1, 0.2], vec![0.0, 0.3, 0.35, 0.9, 1.4]).unwrap();
        let avg = (build_left_riemann(&grid) + build_right_riemann(&grid)) * 0.5;
        assert_relative_eq!(avg, build_trapezoid(&grid), epsilon = 1e-15);
    }

    #[test]
    fn rows_have_disjoint_support_and_full_rank() {
        let grid = unit_grid(7, 4);
        for rule in [QuadratureRule::Trapezoid, QuadratureRule::LeftRiemann, QuadratureRule::RightRiemann] {
            let g = rule.build(&grid);
            assert_eq!(row_slices(&g, &grid), Some(vec![0, 1, 2, 3]));
            let c = LinearConstraint::new(g, DVector::zeros(4), 0.0).unwrap();
            assert_eq!(c.rank(), 4);
        }
    }

    #[test]
    fn left_riemann_error_on_identity() {
        // Σ x_j Δx for u = x on [0,1] underestimates 1/2 by exactly Δx/2.
        for m in [5, 9, 17] {
            let grid = unit_grid(m, 1);
            let u = DVector::from_vec(grid.positions().to_vec());
            let dx = 1.0 / (m - 1) as f64;
            let got = (build_left_riemann(&grid) * u)[0];
            assert_relative_eq!(0.5 - got, dx / 2.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn trapezoid_second_order_on_smooth_nonperiodic() {
        let errs: Vec<f64> = [9, 17, 33, 65]
            .iter()
            .map(|&m| {
                let grid = unit_grid(m, 1);
                let u = DVector::from_iterator(m, grid.positions().iter().map(|x| x.exp()));
                ((build_trapezoid(&grid) * u)[0] - (1f64.exp() - 1.0)).abs()
            })
            .collect();
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!(order >= 1.9, "order {order}");
        }
    }

    #[test]
    fn trapezoid_exact_for_full_period_sine() {
        // The periodic trapezoid rule is spectrally accurate, so the error on
        // sin over [0, 2π] sits at roundoff for every resolution.
        for m in [17, 33, 65] {
            let grid = Grid::uniform((0.0, 1.0), 1, (0.0, 2.0 * std::f64::consts::PI), m).unwrap();
            let u = DVector::from_iterator(m, grid.positions().iter().map(|x| x.sin()));
            assert!((build_trapezoid(&grid) * u)[0].abs() < 1e-14);
        }
    }

    #[test]
    fn second_difference_examples() {
        let grid = unit_grid(3, 1);
        let d = build_second_difference(&grid, 0).unwrap();
        assert_eq!(d.shape(), (1, 3));
        assert_eq!(d.as_slice(), &[2.0, -4.0, 2.0]);

        let grid = Grid::uniform((0.0, 1.0), 1, (0.0, 1.0), 11).unwrap();
        let d = build_second_difference(&grid, 0).unwrap();
        let affine = DVector::from_iterator(11, grid.positions().iter().map(|x| 3.0 * x));
        assert!((&d * affine).amax() < 1e-13);
        let quad = DVector::from_iterator(11, grid.positions().iter().map(|x| x * x));
        for v in (&d * quad).iter() {
            assert_relative_eq!(*v, 0.2, epsilon = 1e-12);
        }
    }

    #[test]
    fn second_difference_rejects_nonuniform_and_bad_index() {
        let grid = Grid::new(vec![0.0], vec![0.0, 0.1, 0.3, 0.4]).unwrap();
        assert!(matches!(build_second_difference(&grid, 0), Err(Error::Unsupported(_))));
        let grid = unit_grid(5, 2);
        assert!(matches!(build_second_difference(&grid, 2), Err(Error::Index { .. })));
    }

    #[test]
    fn second_difference_blocks_are_block_diagonal() {
        let grid = unit_grid(5, 3);
        let blocks = build_second_difference_blocks(&grid, &[0, 2]).unwrap();
        assert_eq!(blocks.shape(), (6, 15));
        assert_eq!(row_slices(&blocks, &grid), Some(vec![0, 0, 0, 2, 2, 2]));
    }

    #[test]
    fn penalty_variance_examples() {
        assert_eq!(penalty_row_variance(&[1.0; 3], 0.0).unwrap(), vec![6.0]);
        assert_eq!(penalty_row_variance(&[1.0; 3], 1.0).unwrap(), vec![0.0]);
        assert_eq!(penalty_row_variance(&[1.0, 0.0, 0.0], 0.0).unwrap(), vec![1.0]);
        assert!(matches!(penalty_row_variance(&[1.0; 3], 1.5), Err(Error::Range(_))));
        assert!(matches!(penalty_row_variance(&[1.0; 2], 0.5), Err(Error::Shape(_))));
    }

    #[test]
    fn grid_validation() {
        assert!(Grid::new(vec![0.0], vec![0.0]).is_err());
        assert!(Grid::new(vec![], vec![0.0, 1.0]).is_err());
        assert!(Grid::new(vec![0.0, 0.0], vec![0.0, 1.0]).is_err());
        let g = unit_grid(4, 3);
        assert_eq!(g.len(), 12);
        assert_eq!(g.index(2, 1), 9);
        assert_eq!(g.slice_range(1), 4..8);
        assert_eq!(g.points().nth(5), Some((0.5, 1.0 / 3.0)));
    }
}
