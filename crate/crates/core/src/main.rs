use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use probconserv::harness::{
    emit_results, run_experiment, split_seed, sweep_sigma, verify_theorem, write_file, write_json,
    ExperimentConfig, OutputFormat, Provenance, Setup,
};
use probconserv::inference::ContextSet;
use probconserv::pde::PdeFamily;
use probconserv::quadrature::Grid;
use probconserv::{Error, Result};

#[derive(Parser)]
#[command(name = "probconserv", version, about = "Conservation-constrained Gaussian field estimates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write context sets and reference solutions for every replicate.
    Generate(Common),
    /// Compare the Step-2 methods and write metrics.
    Run(Common),
    /// Sweep σ_G on one replicate and write CE², LL and MSE per value.
    SweepSigma(Common),
    /// Check the monotone-convergence properties on random and GP instances.
    VerifyTheorem {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Number of random instances.
        #[arg(long, default_value_t = 50)]
        instances: usize,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults for `--family` when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "pme")]
    family: FamilyArg,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `run.output`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output format; both are written when omitted.
    #[arg(long, value_enum)]
    format: Option<OutputFormat>,
    /// 201 × 201 grid, 50 replicates, diagonal Step-1 covariance.
    #[arg(long)]
    paper_scale: bool,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum FamilyArg {
    Diffusion,
    Pme,
    Stefan,
    Advection,
    Burgers,
}

impl From<FamilyArg> for PdeFamily {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Diffusion => PdeFamily::Diffusion,
            FamilyArg::Pme => PdeFamily::Pme,
            FamilyArg::Stefan => PdeFamily::Stefan,
            FamilyArg::Advection => PdeFamily::Advection,
            FamilyArg::Burgers => PdeFamily::Burgers,
        }
    }
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default_for(self.family.into()),
        };
        if let Some(s) = self.seed {
            cfg.run.seed = s;
        }
        if self.paper_scale {
            cfg.paper_scale();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.out
            .clone()
            .or_else(|| cfg.run.output.as_ref().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"))
    }

    fn formats(&self) -> Vec<OutputFormat> {
        match self.format {
            Some(f) => vec![f],
            None => vec![OutputFormat::Json, OutputFormat::Csv],
        }
    }
}

#[derive(Serialize)]
struct Dataset {
    provenance: Provenance,
    params: Vec<ParamData>,
}

#[derive(Serialize)]
struct ParamData {
    param: f64,
    grid: Grid,
    /// Exact solution on the grid, time-major.
    reference: Vec<f64>,
    /// b(t) at every grid time.
    mass: Vec<f64>,
    contexts: Vec<ContextSet>,
}

fn generate(c: &Common) -> Result<()> {
    let cfg = c.config()?;
    let mut params = vec![];
    for (pi, &param) in cfg.pde.test_params.iter().enumerate() {
        let setup = Setup::new(&cfg, param)?;
        let contexts = (0..cfg.run.n_test)
            .map(|r| setup.context(&cfg, split_seed(cfg.run.seed, pi as u64, r as u64)))
            .collect::<Result<Vec<_>>>()?;
        params.push(ParamData {
            param,
            grid: setup.grid.clone(),
            reference: setup.u_exact.as_slice().to_vec(),
            mass: setup.constraint.b.as_slice().to_vec(),
            contexts,
        });
    }
    let dir = c.out_dir(&cfg);
    create_dir(&dir)?;
    let p = dir.join("dataset.json");
    write_json(&p, &Dataset { provenance: Provenance::of(&cfg)?, params })?;
    println!("wrote {}", p.display());
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

fn run(c: &Common) -> Result<()> {
    let cfg = c.config()?;
    let out = run_experiment(&cfg)?;
    for p in &out.results {
        let failed = p.replicates.iter().filter(|r| r.error.is_some()).count();
        println!("{} = {} (t = {}): {failed} failed replicates", cfg.pde.family.param_name(), p.param, out.eval_time);
        for s in &p.summary {
            let fmt = |x: Option<probconserv::harness::Stat>| {
                x.map(|s| format!("{:.3e} ± {:.1e}", s.mean, s.std_error)).unwrap_or_else(|| "-".into())
            };
            println!("  {:<22} CE {:<22} LL {:<22} MSE {}", s.method.name(), fmt(s.ce), fmt(s.ll), fmt(s.mse));
        }
    }
    for p in emit_results(&out, &c.out_dir(&cfg), &c.formats())? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn sweep(c: &Common) -> Result<()> {
    let cfg = c.config()?;
    let out = sweep_sigma(&cfg)?;
    let dir = c.out_dir(&cfg);
    create_dir(&dir)?;
    let formats = c.formats();
    if formats.contains(&OutputFormat::Json) {
        let p = dir.join("sweep.json");
        write_json(&p, &out)?;
        println!("wrote {}", p.display());
    }
    if formats.contains(&OutputFormat::Csv) {
        let mut s = String::from("sigma_g,precision,ce2,ce_eval,ll,mse\n");
        for q in &out.points {
            let prec = q.precision.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{},{},{},{}\n", q.sigma_g, prec, q.ce2, q.ce_eval, q.ll, q.mse));
        }
        let p = dir.join("sweep.csv");
        write_file(&p, s.as_bytes())?;
        println!("wrote {}", p.display());
    }
    println!(
        "CE² non-increasing: {}; LL non-decreasing below σ_G = {}",
        out.ce2_non_increasing,
        out.ll_crossover.map(|v| v.to_string()).unwrap_or_else(|| "-".into())
    );
    Ok(())
}

fn theorem(seed: u64, out: &Path, instances: usize) -> Result<bool> {
    let rep = verify_theorem(seed, instances)?;
    create_dir(out)?;
    let p = out.join("theorem.json");
    write_json(&p, &rep)?;
    let held = rep.random.iter().filter(|t| t.checks.all_hold()).count();
    println!("random instances: {held}/{} hold all checks", rep.random.len());
    let g = &rep.gp_diffusion;
    println!(
        "GP diffusion: checks {:?}, KKT gap {:.2e}, LL non-decreasing below σ_G = {:?}",
        g.checks, g.kkt_discrepancy, g.ll_crossover
    );
    println!("wrote {}", p.display());
    Ok(rep.all_hold)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Generate(c) => generate(c).map(|_| true),
        Command::Run(c) => run(c).map(|_| true),
        Command::SweepSigma(c) => sweep(c).map(|_| true),
        Command::VerifyTheorem { seed, out, instances } => theorem(*seed, out, *instances),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
