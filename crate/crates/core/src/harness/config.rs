use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::SearchConfig;
use crate::pde::PdeFamily;
use crate::quadrature::QuadratureRule;

/// Step-2 methods compared by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Step-1 field as is.
    Unconstrained,
    /// Euclidean projection of the Step-1 mean; Step-1 covariance kept.
    #[serde(rename = "hardc")]
    HardC,
    /// Constrained posterior update.
    #[serde(rename = "probconserv")]
    ProbConserv,
    /// Constrained update followed by second-difference smoothing.
    #[serde(rename = "probconserv_diffusion")]
    ProbConservDiffusion,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Unconstrained,
        Method::HardC,
        Method::ProbConserv,
        Method::ProbConservDiffusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Unconstrained => "unconstrained",
            Method::HardC => "hardc",
            Method::ProbConserv => "probconserv",
            Method::ProbConservDiffusion => "probconserv_diffusion",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeSection {
    pub family: PdeFamily,
    /// Admissible parameter range 𝒜.
    pub param_range: (f64, f64),
    pub test_params: Vec<f64>,
    /// End of the time window; defaults per family.
    #[serde(default)]
    pub time_horizon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub t_test: usize,
    pub m_test: usize,
    /// Time at which headline metrics are reported; snapped to the nearest
    /// grid time. Defaults per family.
    #[serde(default)]
    pub eval_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextSection {
    pub size: usize,
    #[serde(default)]
    pub noise_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMode {
    #[default]
    Full,
    /// Keep only the predictive variances.
    Diagonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step1Section {
    #[serde(default)]
    pub covariance: CovarianceMode,
    /// Add the fitted observation noise to the predictive covariance.
    #[serde(default = "yes")]
    pub predictive_noise: bool,
    #[serde(default)]
    pub search: SearchConfig,
}

fn yes() -> bool {
    true
}

impl Default for Step1Section {
    fn default() -> Self {
        Step1Section {
            covariance: CovarianceMode::Full,
            predictive_noise: true,
            search: SearchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothingSlices {
    /// Only the evaluation slice.
    #[default]
    Eval,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step2Section {
    #[serde(default)]
    pub sigma_g: f64,
    /// Decreasing σ_G schedule for `sweep-sigma`; a log-spaced default is
    /// used when absent.
    #[serde(default)]
    pub sigma_sweep: Option<Vec<f64>>,
    #[serde(default)]
    pub quadrature: QuadratureRule,
    #[serde(default = "default_rho")]
    pub diffusion_rho: f64,
    #[serde(default)]
    pub diffusion_slices: SmoothingSlices,
    #[serde(default = "default_floor")]
    pub diffusion_variance_floor: f64,
}

fn default_rho() -> f64 {
    0.5
}

fn default_floor() -> f64 {
    1e-12
}

impl Default for Step2Section {
    fn default() -> Self {
        Step2Section {
            sigma_g: 0.0,
            sigma_sweep: None,
            quadrature: QuadratureRule::Trapezoid,
            diffusion_rho: default_rho(),
            diffusion_slices: SmoothingSlices::Eval,
            diffusion_variance_floor: default_floor(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub n_test: usize,
    #[serde(default)]
    pub seed: u64,
    pub methods: Vec<Method>,
    /// Posterior draws for the shock histogram at the evaluation time
    /// (0 disables).
    #[serde(default = "default_shock_samples")]
    pub shock_samples: usize,
    #[serde(default)]
    pub output: Option<String>,
}

fn default_shock_samples() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub pde: PdeSection,
    pub grid: GridSection,
    pub context: ContextSection,
    #[serde(default)]
    pub step1: Step1Section,
    #[serde(default)]
    pub step2: Step2Section,
    pub run: RunSection,
}

/// Full-size grid and replicate count set by `--paper-scale`.
pub const PAPER_T_TEST: usize = 201;
pub const PAPER_M_TEST: usize = 201;
pub const PAPER_N_TEST: usize = 50;

impl ExperimentConfig {
    /// Desk-scale defaults for a family.
    pub fn default_for(family: PdeFamily) -> Self {
        let (range, test, eval) = match family {
            PdeFamily::Diffusion => ((1.0, 5.0), 1.0, 0.5),
            PdeFamily::Pme => ((1.0, 6.0), 1.0, 0.5),
            PdeFamily::Stefan => ((0.55, 0.7), 0.6, 0.05),
            PdeFamily::Advection => ((1.0, 5.0), 1.0, 0.1),
            PdeFamily::Burgers => ((1.0, 4.0), 1.0, 0.5),
        };
        ExperimentConfig {
            pde: PdeSection {
                family,
                param_range: range,
                test_params: vec![test],
                time_horizon: None,
            },
            grid: GridSection {
                t_test: 21,
                m_test: 101,
                eval_time: Some(eval),
            },
            context: ContextSection { size: 100, noise_std: 0.0 },
            step1: Step1Section::default(),
            step2: Step2Section::default(),
            run: RunSection {
                n_test: 20,
                seed: 0,
                methods: Method::ALL.to_vec(),
                shock_samples: default_shock_samples(),
                output: None,
            },
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn time_horizon(&self) -> f64 {
        self.pde.time_horizon.unwrap_or_else(|| self.pde.family.default_time_horizon())
    }

    pub fn eval_time(&self) -> f64 {
        self.grid.eval_time.unwrap_or_else(|| 0.5 * self.time_horizon())
    }

    /// Restore the large grid and replicate count; the full Step-1
    /// covariance would not fit in memory, so it becomes diagonal.
    pub fn paper_scale(&mut self) {
        self.grid.t_test = PAPER_T_TEST;
        self.grid.m_test = PAPER_M_TEST;
        self.run.n_test = PAPER_N_TEST;
        if self.step1.covariance == CovarianceMode::Full {
            log::info!("full scale: Step-1 covariance switched to diagonal");
            self.step1.covariance = CovarianceMode::Diagonal;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.pde.param_range;
        if !(lo <= hi) {
            return Err(Error::Config(format!("param_range ({lo}, {hi}) is empty")));
        }
        for &p in &self.pde.param_range_and_tests() {
            self.pde.family.check_param(p).map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.pde.test_params.is_empty() {
            return Err(Error::Config("test_params is empty".into()));
        }
        if let Some(p) = self.pde.test_params.iter().find(|p| !(lo..=hi).contains(*p)) {
            return Err(Error::Config(format!("test parameter {p} outside param_range")));
        }
        if self.grid.t_test < 2 || self.grid.m_test < 2 {
            return Err(Error::Config("grid sizes must be >= 2".into()));
        }
        if self.run.methods.contains(&Method::ProbConservDiffusion) && self.grid.m_test < 3 {
            return Err(Error::Config("diffusion smoothing needs m_test >= 3".into()));
        }
        if self.run.n_test < 1 {
            return Err(Error::Config("n_test must be >= 1".into()));
        }
        if self.context.size < 5 {
            return Err(Error::Config("context size must be >= 5 for the hyperparameter fit".into()));
        }
        if !(self.context.noise_std >= 0.0) {
            return Err(Error::Config("context noise_std must be >= 0".into()));
        }
        let t = self.time_horizon();
        if !(t > 0.0) {
            return Err(Error::Config("time_horizon must be positive".into()));
        }
        let te = self.eval_time();
        if !(0.0..=t).contains(&te) {
            return Err(Error::Config(format!("eval_time {te} outside [0, {t}]")));
        }
        if !(self.step2.sigma_g >= 0.0 && self.step2.sigma_g.is_finite()) {
            return Err(Error::Config("sigma_g must be >= 0".into()));
        }
        if let Some(s) = &self.step2.sigma_sweep {
            if s.is_empty() || s.iter().any(|v| !(*v >= 0.0)) || s.windows(2).any(|w| w[1] >= w[0]) {
                return Err(Error::Config("sigma_sweep must be non-empty, >= 0 and strictly decreasing".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.step2.diffusion_rho) {
            return Err(Error::Config("diffusion_rho must be in [0, 1]".into()));
        }
        if !(self.step2.diffusion_variance_floor > 0.0) {
            return Err(Error::Config("diffusion_variance_floor must be > 0".into()));
        }
        if self.run.shock_samples != 0 && self.run.shock_samples < 100 {
            return Err(Error::Config("shock_samples must be 0 or >= 100".into()));
        }
        Ok(())
    }
}

impl PdeSection {
    fn param_range_and_tests(&self) -> Vec<f64> {
        let mut v = vec![self.param_range.0, self.param_range.1];
        v.extend(&self.test_params);
        v
    }
}
