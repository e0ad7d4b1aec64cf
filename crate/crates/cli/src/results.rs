//! `results.csv` rows and run records.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::CliError;

pub const RESULTS_HEADER: [&str; 13] = [
    "method",
    "n",
    "L",
    "N",
    "p",
    "segments",
    "C",
    "seed",
    "mcc",
    "mcc_spearman",
    "loglik",
    "runtime_s",
    "status",
];

/// One line of `results.csv`. Missing scores are written as empty fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub n: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    #[serde(rename = "N")]
    pub len: usize,
    pub p: usize,
    pub segments: usize,
    #[serde(rename = "C")]
    pub states: usize,
    pub seed: u64,
    pub mcc: Option<f64>,
    pub mcc_spearman: Option<f64>,
    pub loglik: Option<f64>,
    pub runtime_s: f64,
    pub status: String,
}

impl ResultRow {
    /// Row skeleton from a run config; scores unset, status `ok`.
    pub fn from_config(cfg: &ExperimentConfig, seed: u64) -> Self {
        Self {
            method: cfg.method.clone(),
            n: cfg.n,
            layers: cfg.layers,
            len: cfg.len,
            p: cfg.p,
            segments: cfg.segments,
            states: cfg.states,
            seed,
            mcc: None,
            mcc_spearman: None,
            loglik: None,
            runtime_s: 0.0,
            status: "ok".into(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Appends rows, writing the header first when the file is new or empty.
pub fn append_rows(path: &Path, rows: &[ResultRow]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh {
        w.write_record(RESULTS_HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != RESULTS_HEADER {
        return Err(CliError::Usage(format!(
            "{} does not have the results.csv header",
            path.display()
        )));
    }
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Provenance of one run: enough to regenerate its results row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub wall_time_s: f64,
    pub result: ResultRow,
    pub corr: Option<Vec<Vec<f64>>>,
    pub perm: Option<Vec<usize>>,
    pub artifacts: Vec<PathBuf>,
}

pub fn version_string() -> String {
    format!("iia {}", env!("CARGO_PKG_VERSION"))
}
