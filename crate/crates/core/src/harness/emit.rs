use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::run::RunOutput;
use crate::error::{Error, Result};

/// Column order of the flat metrics table.
pub const CSV_HEADER: [&str; 8] = ["replicate", "method", "time_index", "ce", "ll", "mse", "shock_est", "shock_spread"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Json,
    Csv,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Flat table of one test parameter: one row per replicate × method × time
/// index, rows ordered by replicate then method list then time.
pub fn metrics_csv(output: &RunOutput, param_index: usize) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(vec![]);
    let csv_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    if let Some(p) = output.results.get(param_index) {
        for rep in &p.replicates {
            for m in &rep.methods {
                for r in &m.records {
                    w.write_record([
                        rep.replicate.to_string(),
                        m.method.to_string(),
                        r.time_index.to_string(),
                        r.ce.to_string(),
                        r.ll.to_string(),
                        r.mse.to_string(),
                        opt(r.shock_estimate),
                        opt(r.shock_spread),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
    }
    w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(v).map_err(|e| Error::Config(format!("json: {e}")))?;
    s.push(b'\n');
    Ok(s)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    write_file(path, &to_json(v)?)
}

/// Write `results.json` and/or `metrics_<i>.csv` (one per test parameter)
/// into `dir`, returning the paths written.
pub fn emit_results(output: &RunOutput, dir: &Path, formats: &[OutputFormat]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = vec![];
    if formats.contains(&OutputFormat::Json) {
        let p = dir.join("results.json");
        write_json(&p, output)?;
        written.push(p);
    }
    if formats.contains(&OutputFormat::Csv) {
        for i in 0..output.results.len().max(1) {
            let p = dir.join(format!("metrics_{i}.csv"));
            write_file(&p, &metrics_csv(output, i)?)?;
            written.push(p);
        }
    }
    Ok(written)
}

/// Parse a `results.json` back into memory.
pub fn read_results(path: &Path) -> Result<RunOutput> {
    let s = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&s).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
