use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{CovarianceMode, ExperimentConfig, Method, SmoothingSlices};
use crate::constrain::{apply_constraint, apply_diffusion_smoothing, hard_projection, smoothing_row_variances};
use crate::error::{Error, Result};
use crate::evaluate::{
    conservation_error, default_shock_threshold, log_likelihood, mse, shock_estimate, shock_posterior, MetricsRecord,
};
use crate::inference::{
    fit_hyperparameters, gp_fit_predict, gp_fit_predict_diagonal, ContextPoint, ContextSet, GaussianField, KernelConfig,
};
use crate::pde::{PdeFamily, PdeInstance};
use crate::quadrature::{build_second_difference_blocks, Grid, LinearConstraint};

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent seed for `(stream, index)` under a master seed.
pub fn split_seed(master: u64, stream: u64, index: u64) -> u64 {
    mix(mix(mix(master) ^ stream) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03))
}

/// `n_points` noise-free observations at `(t, x) ~ Uniform([0, t_max] × Ω)`.
pub fn generate_context(p: &PdeInstance, n_points: usize, seed: u64) -> Result<ContextSet> {
    if n_points < 1 {
        return Err(Error::Range("context needs at least one point".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x0, x1) = p.space_domain();
    let tmax = p.time_horizon();
    let points = (0..n_points)
        .map(|_| {
            let t = rng.random_range(0.0..=tmax);
            let x = rng.random_range(x0..=x1);
            Ok(ContextPoint { t, x, u: p.eval_exact(t, x)? })
        })
        .collect::<Result<Vec<_>>>()?;
    ContextSet::new(points, 0.0)
}

/// Add i.i.d. `N(0, noise_std²)` to every observation.
pub fn add_observation_noise(ctx: &ContextSet, noise_std: f64, seed: u64) -> Result<ContextSet> {
    if noise_std == 0.0 {
        return ContextSet::new(ctx.points().to_vec(), 0.0);
    }
    let normal = Normal::new(0.0, noise_std).map_err(|e| Error::Range(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = ctx
        .points()
        .iter()
        .map(|p| ContextPoint { u: p.u + normal.sample(&mut rng), ..*p })
        .collect();
    ContextSet::new(pts, noise_std)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of the effective configuration.
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
}

impl Provenance {
    pub fn of(cfg: &ExperimentConfig) -> Result<Self> {
        let canon = serde_json::to_vec(cfg).map_err(|e| Error::Config(e.to_string()))?;
        let digest = Sha256::digest(&canon);
        Ok(Provenance {
            config_hash: digest.iter().map(|b| format!("{b:02x}")).collect(),
            seed: cfg.run.seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRecords {
    pub method: Method,
    /// One record per time index.
    pub records: Vec<MetricsRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub seed: u64,
    pub methods: Vec<MethodRecords>,
    /// Reason the replicate was aborted.
    pub error: Option<String>,
}

/// Mean and standard error over replicates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std_error = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, std_error, n: values.len() })
    }
}

/// Summary of one method at the evaluation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub ce: Option<Stat>,
    pub ll: Option<Stat>,
    pub mse: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamResult {
    pub param: f64,
    pub kernel: Option<KernelConfig>,
    /// Exact shock position at the evaluation time, if the family has one.
    pub exact_shock: Option<f64>,
    pub replicates: Vec<ReplicateResult>,
    pub summary: Vec<MethodSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub provenance: Provenance,
    pub config: ExperimentConfig,
    pub eval_time_index: usize,
    pub eval_time: f64,
    pub results: Vec<ParamResult>,
}

/// Index of the grid time closest to `t`.
pub fn nearest_time_index(grid: &Grid, t: f64) -> usize {
    grid.times()
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Everything shared by the replicates of one test parameter.
pub struct Setup {
    pub pde: PdeInstance,
    pub grid: Grid,
    pub constraint: LinearConstraint,
    pub u_exact: DVector<f64>,
    pub eval_index: usize,
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig, param: f64) -> Result<Self> {
        let pde = PdeInstance::new(cfg.pde.family, param, cfg.time_horizon())?;
        let grid = Grid::for_instance(&pde, cfg.grid.t_test, cfg.grid.m_test)?;
        let constraint = LinearConstraint::conservation(&pde, &grid, cfg.step2.quadrature, cfg.step2.sigma_g)?;
        let u_exact = grid.evaluate(|t, x| pde.eval_exact(t, x))?;
        let eval_index = nearest_time_index(&grid, cfg.eval_time());
        Ok(Setup { pde, grid, constraint, u_exact, eval_index })
    }

    pub fn context(&self, cfg: &ExperimentConfig, seed: u64) -> Result<ContextSet> {
        let ctx = generate_context(&self.pde, cfg.context.size, seed)?;
        add_observation_noise(&ctx, cfg.context.noise_std, split_seed(seed, 1, 0))
    }

    pub fn step1(&self, cfg: &ExperimentConfig, ctx: &ContextSet, kernel: &KernelConfig) -> Result<GaussianField> {
        match cfg.step1.covariance {
            CovarianceMode::Full => gp_fit_predict(ctx, &self.grid, kernel),
            CovarianceMode::Diagonal => gp_fit_predict_diagonal(ctx, &self.grid, kernel),
        }
    }

    pub fn fit_kernel(&self, cfg: &ExperimentConfig, ctx: &ContextSet, seed: u64) -> Result<KernelConfig> {
        let mut search = cfg.step1.search.clone();
        search.seed = seed;
        search.predictive_noise = cfg.step1.predictive_noise;
        fit_hyperparameters(ctx, &search)
    }
}

fn method_field(
    cfg: &ExperimentConfig,
    setup: &Setup,
    step1: &GaussianField,
    constrained: &mut Option<GaussianField>,
    method: Method,
) -> Result<GaussianField> {
    let c = &setup.constraint;
    let mut probconserv = || -> Result<GaussianField> {
        if constrained.is_none() {
            *constrained = Some(apply_constraint(step1, c)?.0);
        }
        Ok(constrained.clone().unwrap())
    };
    match method {
        Method::Unconstrained => Ok(step1.clone()),
        Method::HardC => {
            let m = hard_projection(step1.mean(), &c.g, &c.b)?;
            GaussianField::new(setup.grid.clone(), m, step1.cov().clone())
        }
        Method::ProbConserv => probconserv(),
        Method::ProbConservDiffusion => {
            let pc = probconserv()?;
            let slices: Vec<usize> = match cfg.step2.diffusion_slices {
                SmoothingSlices::Eval => vec![setup.eval_index],
                SmoothingSlices::All => (0..setup.grid.n_times()).collect(),
            };
            let gt = build_second_difference_blocks(&setup.grid, &slices)?;
            let mut rv = Vec::with_capacity(gt.nrows());
            for &s in &slices {
                rv.extend(smoothing_row_variances(step1, s, cfg.step2.diffusion_rho, cfg.step2.diffusion_variance_floor)?);
            }
            apply_diffusion_smoothing(&pc, &gt, &rv)
        }
    }
}

fn tracks_shock(family: PdeFamily) -> bool {
    family != PdeFamily::Diffusion
}

/// Metrics of one field at every time index.
pub fn field_metrics(
    cfg: &ExperimentConfig,
    setup: &Setup,
    field: &GaussianField,
    shock_seed: u64,
) -> Result<Vec<MetricsRecord>> {
    let grid = &setup.grid;
    let c = &setup.constraint;
    let shocks = tracks_shock(setup.pde.family());
    (0..grid.n_times())
        .map(|ti| {
            let r = grid.slice_range(ti);
            let u = setup.u_exact.rows(r.start, r.len()).into_owned();
            let mean = field.slice_mean(ti)?;
            let shock_estimate = shocks
                .then(|| shock_estimate(mean.as_slice(), grid.positions(), default_shock_threshold(mean.as_slice())))
                .flatten();
            let shock_spread = if shocks && ti == setup.eval_index && cfg.run.shock_samples > 0 {
                shock_posterior(field, ti, cfg.run.shock_samples, shock_seed, None)?
                    .summary
                    .map(|s| 3.0 * s.std)
            } else {
                None
            };
            Ok(MetricsRecord {
                time_index: ti,
                ce: conservation_error(field.mean(), &c.g, &c.b, ti)?,
                ll: log_likelihood(&u, field, ti)?,
                mse: mse(&u, &mean)?,
                shock_estimate,
                shock_spread,
            })
        })
        .collect()
}

fn method_stream(m: Method) -> u64 {
    Method::ALL.iter().position(|x| *x == m).unwrap() as u64 + 100
}

fn run_replicate(
    cfg: &ExperimentConfig,
    setup: &Setup,
    kernel: &KernelConfig,
    seed: u64,
) -> Result<Vec<MethodRecords>> {
    let ctx = setup.context(cfg, seed)?;
    let step1 = setup.step1(cfg, &ctx, kernel)?;
    let mut constrained = None;
    cfg.run
        .methods
        .iter()
        .map(|&m| {
            let f = method_field(cfg, setup, &step1, &mut constrained, m)?;
            let records = field_metrics(cfg, setup, &f, split_seed(seed, method_stream(m), 0))?;
            Ok(MethodRecords { method: m, records })
        })
        .collect()
}

fn summarize(cfg: &ExperimentConfig, replicates: &[ReplicateResult], eval: usize) -> Vec<MethodSummary> {
    cfg.run
        .methods
        .iter()
        .map(|&m| {
            let recs: Vec<&MetricsRecord> = replicates
                .iter()
                .filter(|r| r.error.is_none())
                .filter_map(|r| r.methods.iter().find(|x| x.method == m))
                .map(|x| &x.records[eval])
                .collect();
            let pick = |f: fn(&MetricsRecord) -> f64| Stat::of(&recs.iter().map(|r| f(r)).collect::<Vec<_>>());
            MethodSummary {
                method: m,
                ce: pick(|r| r.ce),
                ll: pick(|r| r.ll),
                mse: pick(|r| r.mse),
            }
        })
        .collect()
}

fn failed(replicate: usize, seed: u64, e: &Error) -> ReplicateResult {
    ReplicateResult { replicate, seed, methods: vec![], error: Some(e.to_string()) }
}

/// Run every replicate for every test parameter.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let provenance = Provenance::of(cfg)?;
    let mut results = Vec::with_capacity(cfg.pde.test_params.len());
    let mut eval = (0, cfg.eval_time());
    for (pi, &param) in cfg.pde.test_params.iter().enumerate() {
        let seeds: Vec<u64> = (0..cfg.run.n_test).map(|r| split_seed(cfg.run.seed, pi as u64, r as u64)).collect();
        let setup = match Setup::new(cfg, param) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("parameter {param}: {e}");
                results.push(ParamResult {
                    param,
                    kernel: None,
                    exact_shock: None,
                    replicates: seeds.iter().enumerate().map(|(r, &s)| failed(r, s, &e)).collect(),
                    summary: summarize(cfg, &[], 0),
                });
                continue;
            }
        };
        eval = (setup.eval_index, setup.grid.times()[setup.eval_index]);
        let exact_shock = setup.pde.shock_position_exact(eval.1)?;
        let kernel = setup
            .context(cfg, seeds[0])
            .and_then(|ctx| setup.fit_kernel(cfg, &ctx, seeds[0]));
        let replicates: Vec<ReplicateResult> = match &kernel {
            Err(e) => {
                log::warn!("parameter {param}: kernel fit failed: {e}");
                seeds.iter().enumerate().map(|(r, &s)| failed(r, s, e)).collect()
            }
            Ok(k) => seeds
                .par_iter()
                .enumerate()
                .map(|(r, &s)| match run_replicate(cfg, &setup, k, s) {
                    Ok(methods) => ReplicateResult { replicate: r, seed: s, methods, error: None },
                    Err(e) => {
                        log::warn!("parameter {param}, replicate {r}: {e}");
                        failed(r, s, &e)
                    }
                })
                .collect(),
        };
        let summary = summarize(cfg, &replicates, setup.eval_index);
        results.push(ParamResult { param, kernel: kernel.ok(), exact_shock, replicates, summary });
    }
    Ok(RunOutput {
        provenance,
        config: cfg.clone(),
        eval_time_index: eval.0,
        eval_time: eval.1,
        results,
    })
}
