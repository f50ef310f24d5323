//! Step 2: condition a Gaussian field on `b = G u + ε`, `ε ~ N(0, diag(s²))`.
//!
//! All solves are against `s²I + GΣGᵀ`, never against `Σ` or the
//! information matrix, so a zero noise level is allowed.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{symmetrize, Covariance, GaussianField};
use crate::quadrature::{penalty_row_variance, row_slices, LinearConstraint};

/// Diagnostics of one constrained update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    /// `G μ − b` before the update.
    pub input_residual: DVector<f64>,
    /// `G μ̃ − b` after the update.
    pub output_residual: DVector<f64>,
    pub sigma_g: f64,
    /// Condition estimate of `σ²I + GΣGᵀ` (worst block when solved per slice).
    pub condition_estimate: f64,
}

type SparseRows = Vec<Vec<(usize, f64)>>;

fn sparse_rows(g: &DMatrix<f64>) -> SparseRows {
    (0..g.nrows())
        .map(|r| (0..g.ncols()).filter_map(|c| (g[(r, c)] != 0.0).then(|| (c, g[(r, c)]))).collect())
        .collect()
}

fn sparse_mul(rows: &SparseRows, v: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(rows.len(), rows.iter().map(|row| row.iter().map(|&(c, w)| w * v[c]).sum()))
}

const EXACT_CONDITION_MAX_DIM: usize = 300;

fn condition_of(k: &DMatrix<f64>, chol: Option<&Cholesky<f64, nalgebra::Dyn>>) -> f64 {
    if k.nrows() <= EXACT_CONDITION_MAX_DIM || chol.is_none() {
        let e = k.clone().symmetric_eigenvalues();
        return if e.min() <= 0.0 { f64::INFINITY } else { e.max() / e.min() };
    }
    let d = chol.unwrap().l_dirty().diagonal();
    (d.max() / d.min()).powi(2)
}

struct Dense {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    condition: f64,
}

const REFINE_STEPS: usize = 3;

/// Update on dense `Σ` with sparse `G` rows.
fn dense_update(
    mean: &DVector<f64>,
    sigma: &DMatrix<f64>,
    rows: &SparseRows,
    b: &DVector<f64>,
    noise: &[f64],
) -> Result<Dense> {
    let n = mean.len();
    let r = rows.len();
    // W = Σ Gᵀ, column by column from the nonzeros of each row.
    let mut w = DMatrix::zeros(n, r);
    for (j, row) in rows.iter().enumerate() {
        let mut col = w.column_mut(j);
        for &(c, g) in row {
            col.axpy(g, &sigma.column(c), 1.0);
        }
    }
    let mut k = DMatrix::zeros(r, r);
    for (i, row) in rows.iter().enumerate() {
        for j in 0..r {
            k[(i, j)] = row.iter().map(|&(c, g)| g * w[(c, j)]).sum();
        }
    }
    symmetrize(&mut k);
    for (i, s2) in noise.iter().enumerate() {
        k[(i, i)] += s2;
    }
    let kmax = k.diagonal().amax();
    let chol = Cholesky::new(k.clone()).ok_or_else(|| Error::Solver(format!(
        "σ²I + GΣGᵀ is not positive definite (condition {:.3e}); G must have full row rank",
        condition_of(&k, None)
    )))?;
    let condition = condition_of(&k, Some(&chol));
    let lmin = chol.l_dirty().diagonal().min().powi(2);
    if !(lmin > kmax * f64::EPSILON * r as f64) && noise.iter().all(|&s| s == 0.0) {
        return Err(Error::Solver(format!(
            "GΣGᵀ is numerically singular (condition {condition:.3e})"
        )));
    }

    let d = sparse_mul(rows, mean) - b;
    let apply_k = |y: &DVector<f64>| sparse_mul(rows, &(&w * y)) + DVector::from_iterator(r, noise.iter().zip(y.iter()).map(|(s, v)| s * v));
    let mut y = chol.solve(&d);
    for _ in 0..REFINE_STEPS {
        let res = &d - apply_k(&y);
        if res.amax() <= f64::EPSILON * d.amax() {
            break;
        }
        y += chol.solve(&res);
    }
    let new_mean = mean - &w * y;

    let z = chol.solve(&w.transpose());
    let mut cov = sigma.clone();
    cov.gemm(-1.0, &w, &z, 1.0);
    symmetrize(&mut cov);
    Ok(Dense { mean: new_mean, cov, condition })
}

/// Core update with per-row noise variances; returns the field and the
/// worst condition estimate.
fn update(field: &GaussianField, g: &DMatrix<f64>, b: &DVector<f64>, noise: &[f64]) -> Result<(GaussianField, f64)> {
    let grid = field.grid();
    if g.ncols() != field.len() || g.nrows() != b.len() || noise.len() != b.len() {
        return Err(Error::Shape(format!(
            "G is {}x{}, b has {} entries, {} noise variances, field has {} points",
            g.nrows(),
            g.ncols(),
            b.len(),
            noise.len(),
            field.len()
        )));
    }
    let rows = sparse_rows(g);
    if rows.iter().any(|row| row.is_empty()) {
        return Err(Error::Solver("G has a zero row".into()));
    }
    let slice_local = match field.cov() {
        Covariance::Full(_) => None,
        _ => row_slices(g, grid),
    };

    let Some(owners) = slice_local else {
        let dense_sigma;
        let sigma = match field.cov() {
            Covariance::Full(m) => m,
            other => {
                dense_sigma = other.to_dense();
                &dense_sigma
            }
        };
        let out = dense_update(field.mean(), sigma, &rows, b, noise)?;
        let f = GaussianField::new(grid.clone(), out.mean, Covariance::Full(out.cov))?;
        return Ok((f, out.condition));
    };

    // Block path: Σ and every row live on single time slices, so the
    // update decouples slice by slice and stays block diagonal.
    let m = grid.n_positions();
    let mut mean = field.mean().clone();
    let mut blocks = Vec::with_capacity(grid.n_times());
    let mut condition: f64 = 1.0;
    for s in 0..grid.n_times() {
        let range = grid.slice_range(s);
        let sigma_s = field.cov().sub_block(range.clone());
        let idx: Vec<usize> = (0..rows.len()).filter(|&i| owners[i] == s).collect();
        if idx.is_empty() {
            blocks.push(sigma_s);
            continue;
        }
        let local: SparseRows = idx
            .iter()
            .map(|&i| rows[i].iter().map(|&(c, w)| (c - range.start, w)).collect())
            .collect();
        let b_s = DVector::from_iterator(idx.len(), idx.iter().map(|&i| b[i]));
        let noise_s: Vec<f64> = idx.iter().map(|&i| noise[i]).collect();
        let mu_s = mean.rows(range.start, m).into_owned();
        let out = dense_update(&mu_s, &sigma_s, &local, &b_s, &noise_s)?;
        mean.rows_mut(range.start, m).copy_from(&out.mean);
        blocks.push(out.cov);
        condition = condition.max(out.condition);
    }
    let f = GaussianField::new(grid.clone(), mean, Covariance::BlockDiagonal(blocks))?;
    Ok((f, condition))
}

/// Constrained posterior
/// `μ̃ = μ − ΣGᵀ(σ²I + GΣGᵀ)⁻¹(Gμ − b)`, `Σ̃ = Σ − ΣGᵀ(σ²I + GΣGᵀ)⁻¹GΣ`.
///
/// A full covariance stays full. A diagonal or block-diagonal covariance
/// with slice-local rows of `G` (the quadrature builders) is updated slice
/// by slice and returned block diagonal.
pub fn apply_constraint(field: &GaussianField, c: &LinearConstraint) -> Result<(GaussianField, UpdateReport)> {
    let input_residual = c.residual(field.mean());
    let noise = vec![c.sigma_g * c.sigma_g; c.n_rows()];
    let (out, condition) = update(field, &c.g, &c.b, &noise)?;
    let output_residual = c.residual(out.mean());
    Ok((
        out,
        UpdateReport {
            input_residual,
            output_residual,
            sigma_g: c.sigma_g,
            condition_estimate: condition,
        },
    ))
}

/// Euclidean projection `μ − Gᵀ(GGᵀ)⁻¹(Gμ − b)` onto `{y : G y = b}`.
pub fn hard_projection(mean: &DVector<f64>, g: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if g.ncols() != mean.len() || g.nrows() != b.len() {
        return Err(Error::Shape(format!(
            "G is {}x{}, mean has {} entries, b has {}",
            g.nrows(),
            g.ncols(),
            mean.len(),
            b.len()
        )));
    }
    let ggt = g * g.transpose();
    let e = ggt.clone().symmetric_eigenvalues();
    if !(e.min() > e.max() * f64::EPSILON * g.nrows() as f64) {
        return Err(Error::Solver("G does not have full row rank".into()));
    }
    let chol = Cholesky::new(ggt).ok_or_else(|| Error::Solver("GGᵀ factorization failed".into()))?;
    let mut out = mean.clone();
    for _ in 0..2 {
        let r = g * &out - b;
        out -= g.tr_mul(&chol.solve(&r));
    }
    Ok(out)
}

/// Artificial-diffusion smoothing: the same update with `G ← G̃`, `b = 0`
/// and a separate noise variance per penalty row.
pub fn apply_diffusion_smoothing(field: &GaussianField, gtilde: &DMatrix<f64>, row_variances: &[f64]) -> Result<GaussianField> {
    if let Some(v) = row_variances.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::Range(format!("smoothing row variance {v} must be > 0")));
    }
    let b = DVector::zeros(gtilde.nrows());
    Ok(update(field, gtilde, &b, row_variances)?.0)
}

/// Per-row penalty variances for the second-difference rows of one slice,
/// from the field's marginal standard deviations and neighbour correlation
/// `rho`, floored at `floor`.
pub fn smoothing_row_variances(field: &GaussianField, time_index: usize, rho: f64, floor: f64) -> Result<Vec<f64>> {
    let sd: Vec<f64> = field.slice_variances(time_index)?.iter().map(|v| v.max(0.0).sqrt()).collect();
    Ok(penalty_row_variance(&sd, rho)?.into_iter().map(|v| v.max(floor)).collect())
}

/// `L` with `L Lᵀ = Σ` after clipping negative eigenvalues and adding
/// `1e-12·trace/N`.
fn psd_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = cov.nrows();
    let jitter = 1e-12 * cov.trace().max(0.0) / n as f64;
    let eig = cov.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::Conditioning {
            message: "eigendecomposition of covariance produced non-finite values".into(),
            condition: f64::INFINITY,
        });
    }
    let scale = eig.eigenvalues.map(|l| (l.max(0.0) + jitter).sqrt());
    let mut l = eig.eigenvectors;
    for (j, s) in scale.iter().enumerate() {
        l.column_mut(j).scale_mut(*s);
    }
    Ok(l)
}

/// `n` draws from `N(mean, cov)`, reproducible for a given seed.
pub fn posterior_sample(field: &GaussianField, n: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
    if n == 0 {
        return Err(Error::Range("sample count must be >= 1".into()));
    }
    let dim = field.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| DVector::from_fn(dim, |_, _| StandardNormal.sample(rng));
    match field.cov() {
        Covariance::Diagonal(d) => {
            let jitter = 1e-12 * d.sum().max(0.0) / dim as f64;
            let sd = d.map(|v| (v.max(0.0) + jitter).sqrt());
            Ok((0..n).map(|_| field.mean() + draw(&mut rng).component_mul(&sd)).collect())
        }
        Covariance::Full(c) => {
            let l = psd_factor(c)?;
            Ok((0..n).map(|_| field.mean() + &l * draw(&mut rng)).collect())
        }
        Covariance::BlockDiagonal(blocks) => {
            let factors = blocks.iter().map(psd_factor).collect::<Result<Vec<_>>>()?;
            Ok((0..n)
                .map(|_| {
                    let z = draw(&mut rng);
                    let mut out = field.mean().clone();
                    let mut off = 0;
                    for l in &factors {
                        let k = l.nrows();
                        let mut seg = out.rows_mut(off, k);
                        seg += l * z.rows(off, k);
                        off += k;
                    }
                    out
                })
                .collect())
        }
    }
}
