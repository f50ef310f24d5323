use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::run::{split_seed, Provenance, Setup};
use crate::constrain::apply_constraint;
use crate::error::Result;
use crate::evaluate::{log_likelihood, mse, theorem1_trace, ConvergenceTrace, TraceOptions};
use crate::inference::{fit_hyperparameters, gp_fit_predict, Covariance, GaussianField, KernelConfig, SearchConfig};
use crate::pde::{PdeFamily, PdeInstance};
use crate::quadrature::{build_trapezoid, Grid, LinearConstraint};

/// `n` log-spaced values from `10^hi` down to `10^lo`.
pub fn log_schedule(hi: f64, lo: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| 10f64.powf(hi + (lo - hi) * i as f64 / (n - 1) as f64)).collect()
}

/// Default σ_G schedule: 1 down to 1e-8 in half decades, then 0.
pub fn default_sigma_sweep() -> Vec<f64> {
    let mut s = log_schedule(0.0, -8.0, 17);
    s.push(0.0);
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub sigma_g: f64,
    /// `1/σ_G²`; absent for `σ_G = 0`.
    pub precision: Option<f64>,
    /// `‖G μ̃ − b‖²` over all time slices.
    pub ce2: f64,
    /// Signed conservation error at the evaluation slice.
    pub ce_eval: f64,
    pub ll: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutput {
    pub provenance: Provenance,
    pub param: f64,
    pub eval_time_index: usize,
    pub kernel: KernelConfig,
    /// Metrics of the Step-1 field.
    pub unconstrained: SweepPoint,
    pub points: Vec<SweepPoint>,
    pub ce2_non_increasing: bool,
    /// Largest σ_G from which LL is non-decreasing to the end of the sweep.
    pub ll_crossover: Option<f64>,
}

fn point(setup: &Setup, f: &GaussianField, sigma: f64) -> Result<SweepPoint> {
    let c = &setup.constraint;
    let r = c.residual(f.mean());
    let e = setup.eval_index;
    let range = setup.grid.slice_range(e);
    let u = setup.u_exact.rows(range.start, range.len()).into_owned();
    Ok(SweepPoint {
        sigma_g: sigma,
        precision: (sigma > 0.0).then(|| 1.0 / (sigma * sigma)),
        ce2: r.norm_squared(),
        ce_eval: r[e],
        ll: log_likelihood(&u, f, e)?,
        mse: mse(&u, &f.slice_mean(e)?)?,
    })
}

/// Largest value of `sigmas[k]` such that `values[k..]` is non-decreasing
/// within `slack`.
pub fn crossover(sigmas: &[f64], values: &[f64], slack: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let tol = slack * values.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mut k = values.len() - 1;
    while k > 0 && values[k] >= values[k - 1] - tol {
        k -= 1;
    }
    Some(sigmas[k])
}

/// Step 2 along a decreasing σ_G schedule on replicate 0 of the first test
/// parameter.
pub fn sweep_sigma(cfg: &ExperimentConfig) -> Result<SweepOutput> {
    cfg.validate()?;
    let param = cfg.pde.test_params[0];
    let setup = Setup::new(cfg, param)?;
    let seed = split_seed(cfg.run.seed, 0, 0);
    let ctx = setup.context(cfg, seed)?;
    let kernel = setup.fit_kernel(cfg, &ctx, seed)?;
    let step1 = setup.step1(cfg, &ctx, &kernel)?;
    let sigmas = cfg.step2.sigma_sweep.clone().unwrap_or_else(default_sigma_sweep);
    let points = sigmas
        .iter()
        .map(|&s| {
            let c = setup.constraint.with_sigma(s)?;
            let (f, _) = apply_constraint(&step1, &c)?;
            point(&setup, &f, s)
        })
        .collect::<Result<Vec<_>>>()?;
    let ce2: Vec<f64> = points.iter().map(|p| p.ce2).collect();
    let scale = ce2.first().copied().unwrap_or(0.0).max(f64::MIN_POSITIVE);
    let ce2_non_increasing = ce2.windows(2).all(|w| w[1] <= w[0] + 1e-12 * scale);
    let ll: Vec<f64> = points.iter().map(|p| p.ll).collect();
    Ok(SweepOutput {
        provenance: Provenance::of(cfg)?,
        param,
        eval_time_index: setup.eval_index,
        kernel,
        unconstrained: point(&setup, &step1, f64::INFINITY).map(|mut p| {
            p.precision = Some(0.0);
            p
        })?,
        points,
        ce2_non_increasing,
        ll_crossover: crossover(&sigmas, &ll, 1e-10),
    })
}

/// A random instance for the convergence checks: `Σ = AAᵀ/N + 0.1 I`,
/// Gaussian `G` and `μ`, and a feasible truth `u` with `b = G u`.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub field: GaussianField,
    pub g: DMatrix<f64>,
    pub b: DVector<f64>,
    pub u: DVector<f64>,
}

pub fn random_instance(n: usize, t: usize, seed: u64) -> Result<RandomInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |r: usize, c: usize| DMatrix::<f64>::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng));
    let a = normal(n, n);
    let mut sigma = &a * a.transpose() / n as f64;
    for i in 0..n {
        sigma[(i, i)] += 0.1;
    }
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    let g = normal(t, n);
    let mu = normal(n, 1).column(0).into_owned();
    let u = normal(n, 1).column(0).into_owned();
    let b = &g * &u;
    let grid = Grid::uniform((0.0, 1.0), 1, (0.0, 1.0), n)?;
    let field = GaussianField::new(grid, mu, Covariance::Full(sigma))?;
    Ok(RandomInstance { field, g, b, u })
}

/// GP-backed diffusion instance (`k = 1`) on a small grid, where the
/// trapezoid rule conserves the exact solution to roundoff.
pub fn gp_diffusion_instance(seed: u64) -> Result<RandomInstance> {
    let pde = PdeInstance::with_default_horizon(PdeFamily::Diffusion, 1.0)?;
    let grid = Grid::for_instance(&pde, 6, 21)?;
    let ctx = super::run::generate_context(&pde, 40, seed)?;
    let kernel = fit_hyperparameters(&ctx, &SearchConfig { seed, predictive_noise: true, ..Default::default() })?;
    let field = gp_fit_predict(&ctx, &grid, &kernel)?;
    let g = build_trapezoid(&grid);
    let c = LinearConstraint::conservation(&pde, &grid, Default::default(), 0.0)?;
    let u = grid.evaluate(|t, x| pde.eval_exact(t, x))?;
    Ok(RandomInstance { field, g, b: c.b, u })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub seed: u64,
    pub random: Vec<ConvergenceTrace>,
    pub gp_diffusion: ConvergenceTrace,
    pub all_hold: bool,
}

/// Convergence checks on `n_random` random instances (`N ∈ [10, 40]`,
/// `T ∈ [1, 4]`) and on the GP diffusion instance.
pub fn verify_theorem(seed: u64, n_random: usize) -> Result<TheoremReport> {
    let mut sigmas = log_schedule(0.0, -8.0, 17);
    sigmas.push(0.0);
    let opts = TraceOptions::default();
    let random = (0..n_random)
        .map(|i| {
            let s = split_seed(seed, 7, i as u64);
            let n = 10 + (s % 31) as usize;
            let t = 1 + ((s >> 8) % 4) as usize;
            let inst = random_instance(n, t, s)?;
            theorem1_trace(&inst.field, &inst.g, &inst.b, &inst.u, &sigmas, &opts)
        })
        .collect::<Result<Vec<_>>>()?;
    let gp = gp_diffusion_instance(seed)?;
    let gp_diffusion = theorem1_trace(&gp.field, &gp.g, &gp.b, &gp.u, &sigmas, &opts)?;
    let all_hold = random.iter().all(|t| t.checks.all_hold()) && gp_diffusion.checks.all_hold();
    Ok(TheoremReport { seed, random, gp_diffusion, all_hold })
}
