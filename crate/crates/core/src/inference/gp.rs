//! Gaussian-process backend with an anisotropic squared-exponential kernel
//! over `(t, x)` and zero prior mean.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ContextSet, Covariance, GaussianField};
use crate::error::{Error, Result};
use crate::quadrature::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub lengthscale_t: f64,
    pub lengthscale_x: f64,
    pub signal_variance: f64,
    /// Observation noise variance added to the context Gram matrix.
    pub noise_variance: f64,
    /// Add `noise_variance` to the diagonal of the predictive covariance.
    #[serde(default)]
    pub predictive_noise: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            lengthscale_t: 0.3,
            lengthscale_x: 0.3,
            signal_variance: 1.0,
            noise_variance: 1e-6,
            predictive_noise: false,
        }
    }
}

impl KernelConfig {
    fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.lengthscale_t) || !ok(self.lengthscale_x) || !ok(self.signal_variance) {
            return Err(Error::Range("lengthscales and signal variance must be positive".into()));
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::Range("noise variance must be >= 0".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn eval(&self, (t1, x1): (f64, f64), (t2, x2): (f64, f64)) -> f64 {
        let dt = (t1 - t2) / self.lengthscale_t;
        let dx = (x1 - x2) / self.lengthscale_x;
        self.signal_variance * (-0.5 * (dt * dt + dx * dx)).exp()
    }

    fn gram(&self, a: &[(f64, f64)], b: &[(f64, f64)]) -> DMatrix<f64> {
        DMatrix::from_fn(a.len(), b.len(), |i, j| self.eval(a[i], b[j]))
    }

    /// Gram matrix on a tensor grid from the separable time and space factors.
    fn grid_gram(&self, grid: &Grid) -> DMatrix<f64> {
        let factor = |v: &[f64], l: f64| {
            DMatrix::from_fn(v.len(), v.len(), |i, j| {
                let d = (v[i] - v[j]) / l;
                (-0.5 * d * d).exp()
            })
        };
        let kt = factor(grid.times(), self.lengthscale_t) * self.signal_variance;
        let kx = factor(grid.positions(), self.lengthscale_x);
        kt.kronecker(&kx)
    }

    fn gram_sym(&self, a: &[(f64, f64)]) -> DMatrix<f64> {
        let n = a.len();
        let mut k = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in j..n {
                let v = self.eval(a[i], a[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }
}

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    let e = m.clone().symmetric_eigenvalues();
    let (lo, hi) = (e.min(), e.max());
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Cholesky of `k + jitter·I`, escalating the jitter by ×10 from
/// `1e-10·trace/n` up to `1e-4·trace/n`.
fn jittered_cholesky(k: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    let n = k.nrows();
    let scale = (k.trace() / n as f64).max(f64::MIN_POSITIVE);
    let mut rel = JITTER_START;
    while rel <= JITTER_MAX * (1.0 + 1e-9) {
        let mut kj = k.clone();
        for i in 0..n {
            kj[(i, i)] += rel * scale;
        }
        if let Some(c) = Cholesky::new(kj) {
            if rel > JITTER_START {
                log::debug!("{what}: Cholesky needed jitter {:.1e}·trace/n", rel);
            }
            return Ok(c);
        }
        rel *= 10.0;
    }
    Err(Error::Conditioning {
        message: format!("{what} not positive definite after jitter {JITTER_MAX:.0e}·trace/n"),
        condition: condition_estimate(k),
    })
}

fn context_inputs(context: &ContextSet) -> Vec<(f64, f64)> {
    context.points().iter().map(|p| (p.t, p.x)).collect()
}

fn finish(grid: &Grid, kernel: &KernelConfig, mean: DVector<f64>, mut cov: DMatrix<f64>) -> Result<GaussianField> {
    super::symmetrize(&mut cov);
    if kernel.predictive_noise {
        for i in 0..cov.nrows() {
            cov[(i, i)] += kernel.noise_variance;
        }
    }
    GaussianField::new(grid.clone(), mean, Covariance::Full(cov))
}

/// Prior field: zero mean, kernel Gram matrix on the grid.
pub fn gp_prior(grid: &Grid, kernel: &KernelConfig) -> Result<GaussianField> {
    kernel.validate()?;
    finish(grid, kernel, DVector::zeros(grid.len()), kernel.grid_gram(grid))
}

/// Exact GP posterior mean and covariance on `grid`.
pub fn gp_fit_predict(context: &ContextSet, grid: &Grid, kernel: &KernelConfig) -> Result<GaussianField> {
    kernel.validate()?;
    if context.is_empty() {
        return Err(Error::InsufficientData(
            "empty context; use gp_prior for the prior-only field".into(),
        ));
    }
    let xs = context_inputs(context);
    let mut kc = kernel.gram_sym(&xs);
    for i in 0..xs.len() {
        kc[(i, i)] += kernel.noise_variance;
    }
    let chol = jittered_cholesky(&kc, "context Gram matrix")?;
    let pts: Vec<_> = grid.points().collect();
    // K(X, X*): n × N
    let k_cross = kernel.gram(&xs, &pts);
    let alpha = chol.solve(&context.values());
    let mean = k_cross.tr_mul(&alpha);
    let mut v = k_cross;
    chol.l_dirty().solve_lower_triangular_mut(&mut v);
    let mut cov = kernel.grid_gram(grid);
    cov.gemm(-1.0, &v.transpose(), &v, 1.0);
    finish(grid, kernel, mean, cov)
}

/// GP posterior mean with only the predictive variances, for grids whose
/// full covariance would not fit in memory.
pub fn gp_fit_predict_diagonal(context: &ContextSet, grid: &Grid, kernel: &KernelConfig) -> Result<GaussianField> {
    kernel.validate()?;
    if context.is_empty() {
        return Err(Error::InsufficientData("empty context".into()));
    }
    let xs = context_inputs(context);
    let mut kc = kernel.gram_sym(&xs);
    for i in 0..xs.len() {
        kc[(i, i)] += kernel.noise_variance;
    }
    let chol = jittered_cholesky(&kc, "context Gram matrix")?;
    let pts: Vec<_> = grid.points().collect();
    let k_cross = kernel.gram(&xs, &pts);
    let mean = k_cross.tr_mul(&chol.solve(&context.values()));
    let mut v = k_cross;
    chol.l_dirty().solve_lower_triangular_mut(&mut v);
    let extra = if kernel.predictive_noise { kernel.noise_variance } else { 0.0 };
    let var = DVector::from_iterator(
        pts.len(),
        (0..pts.len()).map(|j| (kernel.signal_variance - v.column(j).norm_squared()).max(0.0) + extra),
    );
    GaussianField::new(grid.clone(), mean, Covariance::Diagonal(var))
}

/// Log marginal likelihood `log p(y | X, θ)` of the context under `kernel`.
pub fn log_marginal_likelihood(context: &ContextSet, kernel: &KernelConfig) -> Result<f64> {
    kernel.validate()?;
    let xs = context_inputs(context);
    let mut k = kernel.gram_sym(&xs);
    for i in 0..xs.len() {
        k[(i, i)] += kernel.noise_variance;
    }
    let chol = jittered_cholesky(&k, "context Gram matrix")?;
    let y = context.values();
    let alpha = chol.solve(&y);
    let logdet: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    let n = y.len() as f64;
    Ok(-0.5 * y.dot(&alpha) - 0.5 * logdet - 0.5 * n * (2.0 * std::f64::consts::PI).ln())
}

/// Bounds and budget for [`fit_hyperparameters`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    /// Lengthscale bounds as multiples of the context span in each dimension.
    pub lengthscale_bounds: (f64, f64),
    /// Bounds on the noise-to-signal variance ratio.
    pub noise_ratio_bounds: (f64, f64),
    /// Grid points per log-scale axis in the initial scan.
    pub grid_points: usize,
    /// Coordinate-refinement sweeps per start.
    pub sweeps: usize,
    /// Extra random starts refined alongside the best grid point.
    pub restarts: usize,
    pub seed: u64,
    /// Copied into the returned [`KernelConfig`].
    pub predictive_noise: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            lengthscale_bounds: (0.01, 10.0),
            noise_ratio_bounds: (1e-6, 1.0),
            grid_points: 8,
            sweeps: 4,
            restarts: 3,
            seed: 0,
            predictive_noise: false,
        }
    }
}

struct Objective {
    xs: Vec<(f64, f64)>,
    y: DVector<f64>,
}

impl Objective {
    /// Log marginal likelihood with the signal variance profiled out, at
    /// `θ = (ln ℓ_t, ln ℓ_x, ln g)`; returns the value and the optimal `s²`.
    fn eval(&self, theta: [f64; 3]) -> (f64, f64) {
        let unit = KernelConfig {
            lengthscale_t: theta[0].exp(),
            lengthscale_x: theta[1].exp(),
            signal_variance: 1.0,
            noise_variance: theta[2].exp(),
            predictive_noise: false,
        };
        let n = self.xs.len();
        let mut r = unit.gram_sym(&self.xs);
        for i in 0..n {
            r[(i, i)] += unit.noise_variance + JITTER_START;
        }
        let Some(chol) = Cholesky::new(r) else {
            return (f64::NEG_INFINITY, 1.0);
        };
        let quad = self.y.dot(&chol.solve(&self.y));
        let s2 = (quad / n as f64).max(f64::MIN_POSITIVE);
        let logdet: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        let nf = n as f64;
        let v = -0.5 * nf * s2.ln() - 0.5 * logdet - 0.5 * nf * (1.0 + (2.0 * std::f64::consts::PI).ln());
        (if v.is_finite() { v } else { f64::NEG_INFINITY }, s2)
    }
}

fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, iters: usize) -> (f64, f64) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..iters {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    if fc >= fd { (c, fc) } else { (d, fd) }
}

/// Maximize the GP log marginal likelihood over a bounded log-scale box:
/// a grid scan, then golden-section coordinate refinement from the best grid
/// point and from seeded random starts.
pub fn fit_hyperparameters(context: &ContextSet, search: &SearchConfig) -> Result<KernelConfig> {
    if context.len() < 5 {
        return Err(Error::InsufficientData(format!(
            "hyperparameter fit needs >= 5 context points, got {}",
            context.len()
        )));
    }
    let xs = context_inputs(context);
    if xs.iter().all(|p| *p == xs[0]) {
        return Err(Error::Fit("all context inputs are identical".into()));
    }
    let (lmin, lmax) = search.lengthscale_bounds;
    let (gmin, gmax) = search.noise_ratio_bounds;
    if !(lmin > 0.0 && lmin < lmax && gmin > 0.0 && gmin < gmax && search.grid_points >= 2) {
        return Err(Error::Config("invalid hyperparameter search bounds".into()));
    }
    let span = |f: fn(&(f64, f64)) -> f64| {
        let (lo, hi) = xs.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
        if hi > lo { hi - lo } else { 1.0 }
    };
    let (st, sx) = (span(|p| p.0), span(|p| p.1));
    let lo = [(lmin * st).ln(), (lmin * sx).ln(), gmin.ln()];
    let hi = [(lmax * st).ln(), (lmax * sx).ln(), gmax.ln()];

    let obj = Objective { xs, y: context.values() };
    let k = search.grid_points;
    let axis = |d: usize, i: usize| lo[d] + (hi[d] - lo[d]) * i as f64 / (k - 1) as f64;

    let mut best = ([0.0; 3], f64::NEG_INFINITY);
    for i in 0..k {
        for j in 0..k {
            for l in 0..k {
                let th = [axis(0, i), axis(1, j), axis(2, l)];
                let v = obj.eval(th).0;
                if v > best.1 {
                    best = (th, v);
                }
            }
        }
    }
    if !best.1.is_finite() {
        return Err(Error::Fit("marginal likelihood not finite anywhere on the search grid".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(search.seed);
    let mut starts = vec![best];
    for _ in 0..search.restarts {
        let th = [0, 1, 2].map(|d| rng.random_range(lo[d]..=hi[d]));
        starts.push((th, obj.eval(th).0));
    }
    for (mut th, mut val) in starts {
        let mut width: [f64; 3] = [0, 1, 2].map(|d| (hi[d] - lo[d]) / (k - 1) as f64);
        for _ in 0..search.sweeps {
            for d in 0..3 {
                let a = (th[d] - width[d]).max(lo[d]);
                let b = (th[d] + width[d]).min(hi[d]);
                let f = |z: f64| {
                    let mut t = th;
                    t[d] = z;
                    obj.eval(t).0
                };
                let (z, fz) = golden_max(f, a, b, 30);
                if fz > val {
                    th[d] = z;
                    val = fz;
                }
                width[d] *= 0.5;
            }
        }
        if val > best.1 {
            best = (th, val);
        }
    }

    let (th, _) = best;
    let s2 = obj.eval(th).1;
    let kernel = KernelConfig {
        lengthscale_t: th[0].exp(),
        lengthscale_x: th[1].exp(),
        signal_variance: s2,
        noise_variance: th[2].exp() * s2,
        predictive_noise: search.predictive_noise,
    };
    log::debug!("fitted kernel {kernel:?}, profiled log marginal likelihood {:.4}", best.1);
    Ok(kernel)
}
