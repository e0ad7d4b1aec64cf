//! Experiment workbench behind the `iia` binary.

pub mod config;
pub mod plot;
pub mod results;
pub mod runner;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use iia::eval::VariabilityReport;
use iia::hmm::HmmModel;
use iia::io::{read_bundle, write_bundle, write_series_csv, ModelFile};

use config::{config_hash, ExperimentConfig, SweepConfig};
use results::{append_rows, read_rows, version_string, ResultRow, RunRecord};

pub const OUT_DIR_ENV: &str = "IIA_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "iia-out";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] iia::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// Process exit code: 2 for usage errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

/// Output root: `$IIA_OUT_DIR` when set, else `./iia-out`.
pub fn out_root() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT_DIR), PathBuf::from)
}

fn require<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, CliError> {
    path.as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing {what} (use --set {what}=PATH)")))
}

fn run_dir(cfg: &ExperimentConfig, root: &Path, seed: u64, single: bool) -> PathBuf {
    match &cfg.out {
        Some(out) if single => out.clone(),
        Some(out) => out.join(format!("seed{seed}")),
        None => root
            .join("runs")
            .join(format!("{}-{}-s{seed}", cfg.method, cfg.for_run(seed).hash())),
    }
}

/// Writes one dataset bundle per seed and reports the variability check
/// of the true natural parameters.
pub fn cmd_gen(cfg: &ExperimentConfig, root: &Path) -> Result<Vec<(PathBuf, VariabilityReport)>, CliError> {
    cfg.validate()?;
    let data_cfg = runner::dataset_config(cfg)?;
    let tag = config_hash(&serde_json::to_value(&data_cfg)?);
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let dir = match &cfg.out {
            Some(o) if cfg.seeds.len() == 1 => o.clone(),
            Some(o) => o.join(format!("seed{seed}")),
            None => root.join("data").join(format!("{tag}-s{seed}")),
        };
        let data = runner::generate(cfg, seed)?;
        write_bundle(&dir, &data)?;
        out.push((dir, runner::truth_variability(&data.truth)?));
    }
    Ok(out)
}

/// Trains on the bundle at `cfg.data`, once per seed. Each run directory
/// gets `model.json`, `train_log.csv` and `run.json`.
pub fn cmd_train(cfg: &ExperimentConfig, root: &Path) -> Result<Vec<PathBuf>, CliError> {
    cfg.validate()?;
    let bundle = read_bundle(require(&cfg.data, "data")?)?;
    let mut dirs = Vec::new();
    for &seed in &cfg.seeds {
        let mut run_cfg = cfg.for_run(seed);
        run_cfg.n = bundle.x.dim();
        run_cfg.len = bundle.x.len();
        let dir = run_dir(cfg, root, seed, cfg.seeds.len() == 1);
        fs::create_dir_all(&dir)?;
        let start = Instant::now();
        let trained = runner::train(&run_cfg, &bundle.x, seed)?;
        let wall = start.elapsed().as_secs_f64();
        let model_path = dir.join("model.json");
        trained.model.save(&model_path)?;
        let log_path = dir.join("train_log.csv");
        let mut artifacts = vec![model_path];
        if let Some(log) = &trained.log {
            log.write_csv(BufWriter::new(File::create(&log_path)?))?;
            artifacts.push(log_path);
        } else if let Some(h) = &trained.hmm {
            h.write_log_csv(BufWriter::new(File::create(&log_path)?))?;
            artifacts.push(log_path);
        }
        let mut result = ResultRow::from_config(&run_cfg, seed);
        result.loglik = trained.loglik;
        result.runtime_s = wall;
        let record = RunRecord {
            config_hash: run_cfg.hash(),
            version: version_string(),
            config: run_cfg,
            seed,
            wall_time_s: wall,
            result,
            corr: None,
            perm: None,
            artifacts,
        };
        fs::write(dir.join("run.json"), serde_json::to_string_pretty(&record)?)?;
        dirs.push(dir);
    }
    Ok(dirs)
}

/// Extracts innovations with the model at `cfg.model` from the bundle at
/// `cfg.data`, writes `s_hat.csv` beside the model (or into `cfg.out`) and
/// appends one row to `results.csv` under `root`. Without `s.csv` the
/// scores are left blank.
pub fn cmd_eval(cfg: &ExperimentConfig, root: &Path) -> Result<ResultRow, CliError> {
    let model_path = require(&cfg.model, "model")?;
    let model = ModelFile::load(model_path)?;
    let bundle = read_bundle(require(&cfg.data, "data")?)?;
    let start = Instant::now();
    let scored = runner::score(&model, &bundle.x, bundle.s.as_ref())?;
    let seed = cfg.seeds.first().copied().unwrap_or(0);
    let mut row = ResultRow::from_config(cfg, seed);
    row.method = model.kind().to_string();
    row.n = bundle.x.dim();
    row.len = bundle.x.len();
    row.runtime_s = start.elapsed().as_secs_f64();
    if let ModelFile::Hmm(HmmModel { final_loglik, .. }) = &model {
        row.loglik = Some(*final_loglik).filter(|v| v.is_finite());
    }
    if let Some(rep) = &scored.report {
        row.mcc = Some(rep.mcc);
        row.mcc_spearman = Some(rep.mcc_spearman);
    }
    let dir = cfg
        .out
        .clone()
        .or_else(|| model_path.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| root.to_path_buf());
    fs::create_dir_all(&dir)?;
    write_series_csv(&dir.join("s_hat.csv"), &scored.s_hat, "s_hat")?;
    append_rows(&root.join("results.csv"), std::slice::from_ref(&row))?;
    Ok(row)
}

/// Runs one grid point end to end. Failures become rows with a
/// `failed: …` status.
pub fn sweep_run(cfg: &ExperimentConfig) -> (ResultRow, RunRecord) {
    let seed = cfg.seeds[0];
    let start = Instant::now();
    let mut row = ResultRow::from_config(cfg, seed);
    let mut corr = None;
    let mut perm = None;
    match runner::run_once(cfg, seed) {
        Ok((trained, scored, runtime)) => {
            row.runtime_s = runtime;
            row.loglik = trained.loglik;
            if let Some(rep) = scored.report {
                row.mcc = Some(rep.mcc);
                row.mcc_spearman = Some(rep.mcc_spearman);
                corr = Some(rep.corr.to_rows());
                perm = Some(rep.perm);
            }
        }
        Err(e) => {
            row.runtime_s = start.elapsed().as_secs_f64();
            row.status = format!("failed: {e}");
        }
    }
    let record = RunRecord {
        config_hash: cfg.hash(),
        version: version_string(),
        config: cfg.clone(),
        seed,
        wall_time_s: start.elapsed().as_secs_f64(),
        result: row.clone(),
        corr,
        perm,
        artifacts: Vec::new(),
    };
    (row, record)
}

/// Runs the sweep grid on a bounded pool of worker threads, then writes
/// `results.csv` (replacing any previous one), the run records and one
/// SVG chart per panel into the sweep directory.
pub fn cmd_sweep(sweep: &SweepConfig, root: &Path) -> Result<(PathBuf, Vec<ResultRow>), CliError> {
    let runs = sweep.runs()?;
    let dir = sweep.base.out.clone().unwrap_or_else(|| root.join("sweep"));
    fs::create_dir_all(dir.join("runs"))?;
    let workers = match sweep.base.threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        t => t,
    }
    .min(runs.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<(ResultRow, RunRecord)>>> = Mutex::new(runs.iter().map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(cfg) = runs.get(i) else { break };
                // HMM restarts share the pool budget: one thread per run.
                let cfg = ExperimentConfig {
                    threads: 1,
                    ..cfg.clone()
                };
                let out = sweep_run(&cfg);
                slots.lock().expect("sweep slots")[i] = Some(out);
            });
        }
    });
    let done: Vec<(ResultRow, RunRecord)> = slots
        .into_inner()
        .expect("sweep slots")
        .into_iter()
        .map(|s| s.expect("every run finishes"))
        .collect();
    let results = dir.join("results.csv");
    if results.exists() {
        fs::remove_file(&results)?;
    }
    let rows: Vec<ResultRow> = done.iter().map(|(r, _)| r.clone()).collect();
    append_rows(&results, &rows)?;
    for (row, record) in &done {
        let name = format!("{}-{}-s{}.json", row.method, record.config_hash, row.seed);
        fs::write(dir.join("runs").join(name), serde_json::to_string_pretty(record)?)?;
    }
    plot::write_panels(&dir, &rows)?;
    Ok((dir, rows))
}

/// Re-draws the panel charts from an existing `results.csv`.
pub fn cmd_plot(results: &Path, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    plot::write_panels(out, &read_rows(results)?)
}
