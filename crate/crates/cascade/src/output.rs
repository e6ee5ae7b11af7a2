//! CSV and JSON writers plus the run manifest.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

use cascade_core::simulate::RolloutResult;

use crate::config::RunConfig;

/// Writes any serializable rows with a header taken from the field names.
pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct RolloutRow {
    step: usize,
    unit: usize,
    inflow_m3s: f64,
    forecast_m3s: f64,
    release_m3s: f64,
    storage_m3: f64,
    generation_mwh: f64,
    sigma2: f64,
    risk_share: Option<f64>,
    status: String,
    cuts: usize,
}

/// Per-step, per-unit trajectory of a rollout.
pub fn write_rollout(path: &Path, r: &RolloutResult, step_seconds: f64) -> anyhow::Result<()> {
    let mut rows = Vec::new();
    for t in 0..r.u.len() {
        for i in 0..r.u[t].len() {
            rows.push(RolloutRow {
                step: t,
                unit: i,
                inflow_m3s: r.q[t][i],
                forecast_m3s: r.mu[t][i],
                release_m3s: r.u[t][i] / step_seconds,
                storage_m3: r.v[t][i],
                generation_mwh: r.p[t][i],
                sigma2: r.sigma2[t][i],
                risk_share: r.risk_alloc[t].as_ref().map(|a| a[i]),
                status: format!("{:?}", r.traces[t].status).to_lowercase(),
                cuts: r.traces[t].cuts,
            });
        }
    }
    write_rows(path, &rows)
}

#[derive(Serialize)]
pub struct CutRow {
    pub step: usize,
    pub iteration: usize,
    pub lambda_star: f64,
    pub probability: f64,
    pub objective_mwh: f64,
}

pub const CUTLOG_HEADER: [&str; 5] = [
    "step",
    "iteration",
    "lambda_star",
    "probability",
    "objective_mwh",
];

/// Writes rows under an explicit header, so an empty table still has one.
pub fn write_rows_with_header<T: Serialize>(
    path: &Path,
    header: &[&str],
    rows: &[T],
) -> anyhow::Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(BufWriter::new(file));
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Cut log of every step of a rollout.
pub fn write_cutlog(path: &Path, r: &RolloutResult) -> anyhow::Result<()> {
    let rows: Vec<CutRow> = r
        .traces
        .iter()
        .enumerate()
        .flat_map(|(t, tr)| {
            tr.cut_log.entries.iter().map(move |e| CutRow {
                step: t,
                iteration: e.iteration,
                lambda_star: e.lambda_star,
                probability: e.probability,
                objective_mwh: e.objective,
            })
        })
        .collect();
    write_rows_with_header(path, &CUTLOG_HEADER, &rows)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// `git describe` of the working directory, or `unknown` outside a checkout.
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_owned())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

#[derive(Debug, Serialize)]
pub struct Seeds {
    pub synth: u64,
    pub scenario: u64,
    pub solver: u64,
    pub garch_fit: u64,
}

#[derive(Debug, Serialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to rerun a command bit-identically.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub git_describe: String,
    pub config_sha256: String,
    pub seeds: Seeds,
    pub models_sha256: Option<String>,
    pub outputs: Vec<OutputFile>,
    /// The effective configuration, overrides applied.
    pub config: String,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        let config = cfg.to_toml();
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            git_describe: git_describe(),
            config_sha256: sha256_hex(config.as_bytes()),
            seeds: Seeds {
                synth: cfg.synth.seed,
                scenario: cfg.scenario.seed,
                solver: cfg.solver.seed,
                garch_fit: cfg.uncertainty.garch.seed,
            },
            models_sha256: None,
            outputs: Vec::new(),
            config,
        }
    }

    /// Records a written file relative to `root`.
    pub fn add_output(&mut self, root: &Path, path: &Path) -> anyhow::Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let rel = path.strip_prefix(root).unwrap_or(path);
        self.outputs.push(OutputFile {
            path: rel.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        let path = dir.join("manifest.json");
        let mut f = BufWriter::new(
            File::create(&path).with_context(|| format!("creating {}", path.display()))?,
        );
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(path)
    }
}
