//! Experiment harness: context generation, the method comparison, σ_G
//! sweeps and result files.

mod config;
mod emit;
mod run;
mod sweep;

pub use config::{
    ContextSection, CovarianceMode, ExperimentConfig, GridSection, Method, PdeSection, RunSection, SmoothingSlices,
    Step1Section, Step2Section,
};
pub use emit::{emit_results, metrics_csv, read_results, write_file, write_json, OutputFormat, CSV_HEADER};
pub use run::{
    add_observation_noise, field_metrics, generate_context, nearest_time_index, run_experiment, split_seed,
    MethodRecords, MethodSummary, ParamResult, Provenance, ReplicateResult, RunOutput, Setup, Stat,
};
pub use sweep::{
    crossover, default_sigma_sweep, gp_diffusion_instance, log_schedule, random_instance, sweep_sigma, verify_theorem,
    RandomInstance, SweepOutput, SweepPoint, TheoremReport,
};
