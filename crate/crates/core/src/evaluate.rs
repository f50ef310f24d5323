//! Metrics, shock-position estimates and the monotone-convergence checks
//! for the constrained update.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::constrain::{apply_constraint, posterior_sample};
use crate::error::{Error, Result};
use crate::inference::{Covariance, GaussianField};
use crate::quadrature::LinearConstraint;

/// Floor on slice variances inside [`log_likelihood`].
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Per-slice metrics of one method on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub time_index: usize,
    pub ce: f64,
    pub ll: f64,
    pub mse: f64,
    pub shock_estimate: Option<f64>,
    pub shock_spread: Option<f64>,
}

/// Signed conservation error `(G μ − b)` at one row.
pub fn conservation_error(mean: &DVector<f64>, g: &DMatrix<f64>, b: &DVector<f64>, time_index: usize) -> Result<f64> {
    if time_index >= g.nrows() || time_index >= b.len() {
        return Err(Error::Index {
            index: time_index,
            len: g.nrows().min(b.len()),
        });
    }
    if g.ncols() != mean.len() {
        return Err(Error::Shape(format!("G has {} columns, mean has {} entries", g.ncols(), mean.len())));
    }
    Ok(g.row(time_index).dot(&mean.transpose()) - b[time_index])
}

/// Predictive log-likelihood of a true slice under the slice's diagonal
/// variances:
/// `−(1/2M) Σ (u−μ)²/σ² − (1/2M) Σ log σ² − log 2π`.
pub fn log_likelihood_diag(u: &DVector<f64>, mean: &DVector<f64>, var: &DVector<f64>) -> Result<f64> {
    if u.len() != mean.len() || u.len() != var.len() || u.is_empty() {
        return Err(Error::Shape(format!(
            "u has {} entries, mean {}, variances {}",
            u.len(),
            mean.len(),
            var.len()
        )));
    }
    let m = u.len() as f64;
    let (mut quad, mut logdet) = (0.0, 0.0);
    for i in 0..u.len() {
        let v = var[i].max(VARIANCE_FLOOR);
        let d = u[i] - mean[i];
        quad += d * d / v;
        logdet += v.ln();
    }
    Ok(-quad / (2.0 * m) - logdet / (2.0 * m) - (2.0 * std::f64::consts::PI).ln())
}

/// [`log_likelihood_diag`] on slice `time_index` of `field`.
pub fn log_likelihood(u_slice: &DVector<f64>, field: &GaussianField, time_index: usize) -> Result<f64> {
    log_likelihood_diag(u_slice, &field.slice_mean(time_index)?, &field.slice_variances(time_index)?)
}

/// Mean squared error `‖u − μ‖² / M`.
pub fn mse(u: &DVector<f64>, mean: &DVector<f64>) -> Result<f64> {
    if u.len() != mean.len() || u.is_empty() {
        return Err(Error::Shape(format!("u has {} entries, mean {}", u.len(), mean.len())));
    }
    Ok((u - mean).norm_squared() / u.len() as f64)
}

/// Default shock threshold `1e-6 · max |u|`.
pub fn default_shock_threshold(profile: &[f64]) -> f64 {
    1e-6 * profile.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

/// Leftmost position whose value is `<= eps`.
pub fn shock_estimate(profile: &[f64], positions: &[f64], eps: f64) -> Option<f64> {
    profile.iter().zip(positions).find(|(u, _)| **u <= eps).map(|(_, x)| *x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShockSummary {
    pub mean: f64,
    pub std: f64,
    /// `mean − 3 std`
    pub lower: f64,
    /// `mean + 3 std`
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShockPosterior {
    /// Shock estimate of every draw that has one.
    pub positions: Vec<f64>,
    /// Draws with no value below the threshold.
    pub shockless: usize,
    /// `None` when every draw was shockless.
    pub summary: Option<ShockSummary>,
}

/// Shock positions of `n` posterior draws of slice `time_index`. With
/// `eps = None` each draw uses [`default_shock_threshold`].
pub fn shock_posterior(field: &GaussianField, time_index: usize, n: usize, seed: u64, eps: Option<f64>) -> Result<ShockPosterior> {
    if n < 100 {
        return Err(Error::Range(format!("shock posterior needs n >= 100 draws, got {n}")));
    }
    let slice = field.marginal_slice(time_index)?;
    let positions_grid = field.grid().positions();
    let draws = posterior_sample(&slice, n, seed)?;
    let mut positions = Vec::with_capacity(n);
    for d in &draws {
        let eps = eps.unwrap_or_else(|| default_shock_threshold(d.as_slice()));
        if let Some(x) = shock_estimate(d.as_slice(), positions_grid, eps) {
            positions.push(x);
        }
    }
    let shockless = n - positions.len();
    let summary = (!positions.is_empty()).then(|| {
        let k = positions.len() as f64;
        let mean = positions.iter().sum::<f64>() / k;
        let var = if positions.len() > 1 {
            positions.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0)
        } else {
            0.0
        };
        let std = var.sqrt();
        ShockSummary { mean, std, lower: mean - 3.0 * std, upper: mean + 3.0 * std }
    });
    Ok(ShockPosterior { positions, shockless, summary })
}

/// Solution of `min ‖y − μ‖_{Σ⁻¹}` subject to `G y = b` from the
/// saddle-point system `[Σ⁻¹ Gᵀ; G 0][y; λ] = [Σ⁻¹ μ; b]`.
pub fn kkt_limit(mean: &DVector<f64>, sigma: &DMatrix<f64>, g: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let n = mean.len();
    let t = g.nrows();
    if sigma.shape() != (n, n) || g.ncols() != n || b.len() != t {
        return Err(Error::Shape("KKT system dimensions disagree".into()));
    }
    let chol = Cholesky::new(sigma.clone()).ok_or_else(|| Error::Conditioning {
        message: "Σ is not positive definite".into(),
        condition: f64::INFINITY,
    })?;
    let prec = chol.inverse();
    let mut kkt = DMatrix::zeros(n + t, n + t);
    kkt.view_mut((0, 0), (n, n)).copy_from(&prec);
    kkt.view_mut((0, n), (n, t)).copy_from(&g.transpose());
    kkt.view_mut((n, 0), (t, n)).copy_from(g);
    let mut rhs = DVector::zeros(n + t);
    rhs.rows_mut(0, n).copy_from(&(&prec * mean));
    rhs.rows_mut(n, t).copy_from(b);
    let sol = kkt.lu().solve(&rhs).ok_or_else(|| Error::Solver("KKT system is singular".into()))?;
    Ok(sol.rows(0, n).into_owned())
}

/// Outcome of each monotonicity claim; `None` when the claim's hypothesis
/// (`G u = b`) does not hold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremChecks {
    pub limit_distance_monotone: bool,
    pub limit_matches_kkt: bool,
    pub residual_monotone: bool,
    pub truth_distance_monotone: Option<bool>,
    pub log_likelihood_monotone: Option<bool>,
}

impl TheoremChecks {
    pub fn all_hold(&self) -> bool {
        self.limit_distance_monotone
            && self.limit_matches_kkt
            && self.residual_monotone
            && self.truth_distance_monotone.unwrap_or(true)
            && self.log_likelihood_monotone.unwrap_or(true)
    }
}

/// Per-σ quantities along a decreasing noise schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    /// Positive, strictly decreasing noise levels.
    pub sigmas: Vec<f64>,
    /// `‖μ̃_n − μ̃*‖_{Σ⁻¹}`
    pub limit_distance: Vec<f64>,
    /// `‖G μ̃_n − b‖₂`
    pub residual_norm: Vec<f64>,
    /// `‖μ̃_n − u‖_{Σ⁻¹}`
    pub truth_distance: Vec<f64>,
    /// Per-coordinate Gaussian log-density of `u` under `N(μ̃_n, Σ̃_n)`.
    pub log_likelihood: Vec<f64>,
    /// Log-density of `u` under the unconstrained `N(μ, Σ)`.
    pub base_log_likelihood: f64,
    /// `‖μ̃* − u‖_{Σ⁻¹}`
    pub limit_truth_distance: f64,
    /// `‖G u − b‖₂`
    pub truth_residual: f64,
    /// Largest σ from which the log-likelihood is non-decreasing to the end
    /// of the schedule.
    pub ll_crossover: Option<f64>,
    /// `sqrt(λ_min(GΣGᵀ))`, the scale below which the noise no longer
    /// dominates every constrained direction.
    pub noise_scale: f64,
    /// Relative gap between `μ̃*` and the saddle-point solution.
    pub kkt_discrepancy: f64,
    /// Max relative error of `‖μ̃_n−u‖² = ‖μ̃_n−μ̃*‖² + ‖μ̃*−u‖²`.
    pub pythagorean_error: f64,
    /// Max error of `G μ̃_n − b = σ²(σ²I + GΣGᵀ)⁻¹(G μ − b)` relative to `‖Gμ − b‖`.
    pub residual_identity_error: f64,
    pub checks: TheoremChecks,
}

/// Options for [`theorem1_trace`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceOptions {
    /// `Σ ← Σ + reg · trace/N · I` before anything else.
    pub regularization: f64,
    /// Absolute slack on monotonicity, scaled by `max(1, first value)`.
    pub slack: f64,
    /// `‖G u − b‖ <= feasibility_tol · (1 + ‖b‖)` enables the `u`-dependent claims.
    pub feasibility_tol: f64,
    pub kkt_tol: f64,
}

impl Default for TraceOptions {
    fn default() -> Self {
        TraceOptions { regularization: 1e-8, slack: 1e-10, feasibility_tol: 1e-10, kkt_tol: 1e-8 }
    }
}

struct Metric {
    chol: Cholesky<f64, Dyn>,
    logdet: f64,
}

impl Metric {
    fn norm_sq(&self, v: &DVector<f64>) -> f64 {
        let mut w = v.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut w);
        w.norm_squared()
    }
}

fn non_increasing(v: &[f64], slack: f64) -> bool {
    let tol = slack * v.first().map_or(1.0, |x| x.abs().max(1.0));
    v.windows(2).all(|w| w[1] <= w[0] + tol)
}

fn non_decreasing(v: &[f64], slack: f64) -> bool {
    let tol = slack * v.first().map_or(1.0, |x| x.abs().max(1.0));
    v.windows(2).all(|w| w[1] >= w[0] - tol)
}

/// Trace of the constrained update along `sigmas`, which must be positive
/// and strictly decreasing, optionally followed by a final `0` (the limit is
/// always computed).
pub fn theorem1_trace(
    field: &GaussianField,
    g: &DMatrix<f64>,
    b: &DVector<f64>,
    u_true: &DVector<f64>,
    sigmas: &[f64],
    opts: &TraceOptions,
) -> Result<ConvergenceTrace> {
    let positive: Vec<f64> = match sigmas.split_last() {
        Some((&0.0, rest)) => rest.to_vec(),
        _ => sigmas.to_vec(),
    };
    if positive.is_empty() || positive.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::Range("σ schedule must be positive, optionally ending in 0".into()));
    }
    if positive.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Range("σ schedule must be strictly decreasing".into()));
    }
    let n = field.len();
    if u_true.len() != n {
        return Err(Error::Shape(format!("u has {} entries, field has {n}", u_true.len())));
    }

    let mut sigma = field.cov().to_dense();
    let reg = opts.regularization * sigma.trace() / n as f64;
    for i in 0..n {
        sigma[(i, i)] += reg;
    }
    let chol = Cholesky::new(sigma.clone()).ok_or_else(|| Error::Conditioning {
        message: "Σ not positive definite after regularization".into(),
        condition: {
            let e = sigma.clone().symmetric_eigenvalues();
            if e.min() <= 0.0 { f64::INFINITY } else { e.max() / e.min() }
        },
    })?;
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let metric = Metric { chol, logdet };
    let base = GaussianField::new(field.grid().clone(), field.mean().clone(), Covariance::Full(sigma.clone()))?;
    let mu = base.mean();

    let s_mat = g * &sigma * g.transpose();
    let s_mat = (&s_mat + s_mat.transpose()) * 0.5;
    let s_eig = s_mat.clone().symmetric_eigenvalues();
    let noise_scale = s_eig.min().max(0.0).sqrt();
    let d = g * mu - b;
    let truth_res = g * u_true - b;
    let truth_residual = truth_res.norm();
    let feasible = truth_residual <= opts.feasibility_tol * (1.0 + b.norm());

    let c0 = LinearConstraint::new(g.clone(), b.clone(), 0.0)?;
    let (limit, _) = apply_constraint(&base, &c0)?;
    let mu_star = limit.mean().clone();
    let kkt = kkt_limit(mu, &sigma, g, b)?;
    let kkt_discrepancy = (&mu_star - &kkt).norm() / kkt.norm().max(f64::MIN_POSITIVE);
    let limit_truth_distance = metric.norm_sq(&(&mu_star - u_true)).sqrt();

    let nf = n as f64;
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let base_log_likelihood = -(metric.norm_sq(&(u_true - mu)) + metric.logdet) / (2.0 * nf) - 0.5 * ln2pi;

    let mut trace = ConvergenceTrace {
        sigmas: positive.clone(),
        limit_distance: vec![],
        residual_norm: vec![],
        truth_distance: vec![],
        log_likelihood: vec![],
        base_log_likelihood,
        limit_truth_distance,
        truth_residual,
        ll_crossover: None,
        noise_scale,
        kkt_discrepancy,
        pythagorean_error: 0.0,
        residual_identity_error: 0.0,
        checks: TheoremChecks {
            limit_distance_monotone: false,
            limit_matches_kkt: false,
            residual_monotone: false,
            truth_distance_monotone: None,
            log_likelihood_monotone: None,
        },
    };

    let t = g.nrows();
    for &s in &positive {
        let s2 = s * s;
        let c = c0.with_sigma(s)?;
        let (post, _) = apply_constraint(&base, &c)?;
        let m = post.mean();
        let dl = metric.norm_sq(&(m - &mu_star));
        let dt = metric.norm_sq(&(m - u_true));
        let res = g * m - b;

        let mut k = s_mat.clone();
        for i in 0..t {
            k[(i, i)] += s2;
        }
        let kchol = Cholesky::new(k).ok_or_else(|| Error::Solver("σ²I + GΣGᵀ not positive definite".into()))?;
        let kd = kchol.solve(&d);
        let predicted = &kd * s2;
        let id_err = (&res - &predicted).norm() / d.norm().max(f64::MIN_POSITIVE);
        trace.residual_identity_error = trace.residual_identity_error.max(id_err);

        if feasible {
            let pyth = (dt - (dl + limit_truth_distance.powi(2))).abs() / dt.max(f64::MIN_POSITIVE);
            trace.pythagorean_error = trace.pythagorean_error.max(pyth);
        }

        // Σ̃⁻¹ = Σ⁻¹ + σ⁻²GᵀG and log det Σ̃ = log det Σ − log det(I + σ⁻²GΣGᵀ).
        let extra = &kd * s - &truth_res / s;
        let quad = dt + extra.norm_squared();
        let mut a = &s_mat / s2;
        for i in 0..t {
            a[(i, i)] += 1.0;
        }
        let a_logdet = 2.0
            * Cholesky::new(a)
                .ok_or_else(|| Error::Solver("I + σ⁻²GΣGᵀ not positive definite".into()))?
                .l_dirty()
                .diagonal()
                .iter()
                .map(|v| v.ln())
                .sum::<f64>();
        let ll = -(quad + metric.logdet - a_logdet) / (2.0 * nf) - 0.5 * ln2pi;

        trace.limit_distance.push(dl.sqrt());
        trace.truth_distance.push(dt.sqrt());
        trace.residual_norm.push(res.norm());
        trace.log_likelihood.push(ll);
    }

    let slack = opts.slack;
    let ll = &trace.log_likelihood;
    let tol = slack * ll[0].abs().max(1.0);
    let mut start = ll.len() - 1;
    while start > 0 && ll[start] >= ll[start - 1] - tol {
        start -= 1;
    }
    trace.ll_crossover = Some(positive[start]);

    trace.checks = TheoremChecks {
        limit_distance_monotone: non_increasing(&trace.limit_distance, slack),
        limit_matches_kkt: kkt_discrepancy <= opts.kkt_tol,
        residual_monotone: non_increasing(&trace.residual_norm, slack),
        truth_distance_monotone: feasible.then(|| non_increasing(&trace.truth_distance, slack)),
        log_likelihood_monotone: feasible.then(|| {
            let below: Vec<f64> = positive
                .iter()
                .zip(ll)
                .filter(|(s, _)| **s <= noise_scale)
                .map(|(_, v)| *v)
                .collect();
            non_decreasing(&below, slack) && *ll.last().unwrap() >= base_log_likelihood - tol
        }),
    };
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::Grid;
    use approx::assert_relative_eq;

    #[test]
    fn ll_reference_values() {
        let u = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let ones = DVector::from_element(3, 1.0);
        assert_relative_eq!(log_likelihood_diag(&u, &u, &ones).unwrap(), -(2.0 * std::f64::consts::PI).ln());
        let a = log_likelihood_diag(&u, &u, &(&ones * 0.5)).unwrap();
        let b = log_likelihood_diag(&u, &u, &(&ones * 0.25)).unwrap();
        assert!(b > a);
        let near = log_likelihood_diag(&u, &(&u + &ones * 0.1), &ones).unwrap();
        let far = log_likelihood_diag(&u, &(&u + &ones * 0.2), &ones).unwrap();
        assert!(far < near);
        // A zero variance is floored rather than producing infinities.
        assert!(log_likelihood_diag(&u, &u, &DVector::zeros(3)).unwrap().is_finite());
    }

    #[test]
    fn mse_examples() {
        let u = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(mse(&u, &u).unwrap(), 0.0);
        assert_relative_eq!(mse(&u, &u.add_scalar(0.5)).unwrap(), 0.25);
        assert!(mse(&u, &DVector::zeros(2)).is_err());
    }

    #[test]
    fn ce_is_signed_row_residual() {
        let g = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        let m = DVector::from_vec(vec![0.2, 0.3, 0.9]);
        assert_relative_eq!(conservation_error(&m, &g, &b, 0).unwrap(), -0.5);
        assert_relative_eq!(conservation_error(&m, &g, &b, 1).unwrap(), 0.2);
        assert!(matches!(conservation_error(&m, &g, &b, 2), Err(Error::Index { .. })));
    }

    #[test]
    fn shock_estimate_rules() {
        let x = [0.0, 0.1, 0.2, 0.3];
        assert_eq!(shock_estimate(&[1.0, 0.5, 0.0, 0.0], &x, 1e-6), Some(0.2));
        assert_eq!(shock_estimate(&[1.0, 0.5, 0.2, 0.1], &x, 1e-6), None);
        assert_eq!(shock_estimate(&[0.0; 4], &x, default_shock_threshold(&[0.0; 4])), Some(0.0));
        assert_eq!(shock_estimate(&[1.0, 0.5, 0.2, 0.1], &x, 0.3), Some(0.2));
    }

    #[test]
    fn zero_covariance_shock_posterior_is_degenerate() {
        let grid = Grid::uniform((0.0, 1.0), 1, (0.0, 1.0), 5).unwrap();
        let mean = DVector::from_vec(vec![1.0, 0.5, 0.0, 0.0, 0.0]);
        let f = GaussianField::new(grid, mean, Covariance::Diagonal(DVector::zeros(5))).unwrap();
        let p = shock_posterior(&f, 0, 100, 3, None).unwrap();
        assert!(p.positions.iter().all(|&x| x == 0.5));
        assert_eq!(p.summary.unwrap().std, 0.0);
        assert!(shock_posterior(&f, 0, 99, 3, None).is_err());
    }

    #[test]
    fn shockless_draws_give_empty_summary() {
        let grid = Grid::uniform((0.0, 1.0), 1, (0.0, 1.0), 5).unwrap();
        let f = GaussianField::new(grid, DVector::from_element(5, 10.0), Covariance::Diagonal(DVector::from_element(5, 1e-4))).unwrap();
        let p = shock_posterior(&f, 0, 100, 3, None).unwrap();
        assert_eq!(p.shockless, 100);
        assert!(p.summary.is_none());
    }

    #[test]
    fn kkt_two_point() {
        let y = kkt_limit(
            &DVector::zeros(2),
            &DMatrix::identity(2, 2),
            &DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            &DVector::from_vec(vec![1.0]),
        )
        .unwrap();
        assert_relative_eq!(y, DVector::from_vec(vec![0.5, 0.5]), epsilon = 1e-14);
    }

    #[test]
    fn trace_fixed_point_is_constant() {
        let grid = Grid::uniform((0.0, 1.0), 2, (0.0, 1.0), 3).unwrap();
        let g = crate::quadrature::build_trapezoid(&grid);
        let u = DVector::from_vec(vec![1.0, 2.0, 1.0, 0.0, 1.0, 2.0]);
        let b = &g * &u;
        let cov = DMatrix::from_fn(6, 6, |i, j| (-((i as f64 - j as f64).powi(2)) / 4.0).exp() + if i == j { 0.1 } else { 0.0 });
        let f = GaussianField::new(grid, u.clone(), Covariance::Full(cov)).unwrap();
        let tr = theorem1_trace(&f, &g, &b, &u, &[1.0, 0.1, 0.01, 0.0], &TraceOptions::default()).unwrap();
        assert!(tr.limit_distance.iter().all(|&v| v < 1e-12));
        assert!(tr.residual_norm.iter().all(|&v| v < 1e-12));
        assert!(tr.checks.all_hold());
    }

    #[test]
    fn trace_rejects_bad_schedules() {
        let grid = Grid::uniform((0.0, 1.0), 1, (0.0, 1.0), 3).unwrap();
        let g = crate::quadrature::build_trapezoid(&grid);
        let f = GaussianField::new(grid, DVector::zeros(3), Covariance::Full(DMatrix::identity(3, 3))).unwrap();
        let b = DVector::zeros(1);
        let u = DVector::zeros(3);
        let o = TraceOptions::default();
        assert!(theorem1_trace(&f, &g, &b, &u, &[0.1, 0.2], &o).is_err());
        assert!(theorem1_trace(&f, &g, &b, &u, &[0.0], &o).is_err());
        assert!(theorem1_trace(&f, &g, &b, &u, &[0.1, -0.1], &o).is_err());
    }
}
