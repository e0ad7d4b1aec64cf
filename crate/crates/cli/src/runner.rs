//! Dataset generation, per-method training and scoring.

use std::time::Instant;

use iia::baselines::{fit_adnvar, nsvica, AdnvarConfig};
use iia::contrastive::{build_contrastive_dataset, train_gcl, train_tcl, GclConfig, NetArch, TclConfig};
use iia::eval::{evaluate, variability_check, EvalReport, VariabilityReport};
use iia::hmm::{train_hmm_em, HmmConfig, HmmOutcome};
use iia::io::ModelFile;
use iia::linalg::Matrix;
use iia::nnet::Activation;
use iia::series::TimeSeries;
use iia::simgen::{
    generate_dataset, segment_labels, Dataset, DatasetConfig, GroundTruth, InnovationKind, InnovationTruth, NvarConfig,
};
use iia::train::{SgdConfig, TrainLog};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, Method};
use crate::CliError;

/// Optimiser defaults per method: learning rate and epochs.
fn sgd_defaults(method: Method) -> (f64, usize) {
    match method {
        Method::Gcl | Method::NicaGcl => (0.1, 30),
        Method::Tcl | Method::NicaTcl => (0.1, 150),
        Method::Adnvar => (0.05, 30),
        Method::Hmm | Method::Nsvica => (0.1, 20),
    }
}

pub fn sgd_config(cfg: &ExperimentConfig, method: Method, seed: u64) -> SgdConfig {
    let (lr, epochs) = sgd_defaults(method);
    let base = SgdConfig::default();
    SgdConfig {
        lr: cfg.lr.unwrap_or(lr),
        epochs: cfg.epochs.unwrap_or(epochs),
        momentum: cfg.momentum.unwrap_or(base.momentum),
        batch_size: cfg.batch.unwrap_or(base.batch_size),
        seed,
        ..base
    }
}

/// Generator settings implied by an experiment: HMM innovations for the
/// HMM method, Fourier-modulated ones otherwise.
pub fn dataset_config(cfg: &ExperimentConfig) -> Result<DatasetConfig, CliError> {
    let innovations = if cfg.method()? == Method::Hmm {
        InnovationKind::Hmm { num_states: cfg.states }
    } else {
        InnovationKind::Nonstationary { num_freq: cfg.num_freq }
    };
    Ok(DatasetConfig {
        nvar: NvarConfig {
            order: cfg.p,
            ar_gain: cfg.ar_gain,
            ..NvarConfig::new(cfg.n, cfg.layers)
        },
        len: cfg.len,
        innovations,
    })
}

pub fn generate(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset, CliError> {
    Ok(generate_dataset(&dataset_config(cfg)?, seed)?)
}

/// Variability of the true natural parameters: `2n + 1` random time points
/// for modulated data, one column per state for HMM data.
pub fn truth_variability(truth: &GroundTruth) -> Result<VariabilityReport, CliError> {
    let columns: Vec<Vec<f64>> = match &truth.innovations {
        InnovationTruth::Nonstationary(spec) => {
            let m = spec.render();
            let points = (2 * m.dim() + 1).min(m.len());
            let mut rng = ChaCha8Rng::seed_from_u64(truth.seed);
            sample(&mut rng, m.len(), points)
                .iter()
                .map(|t| m.natural_params(t))
                .collect()
        }
        InnovationTruth::Hmm(h) => (0..h.num_states())
            .map(|c| {
                (0..h.means.cols())
                    .flat_map(|i| {
                        let (m, v) = (h.means[(c, i)], h.variances[(c, i)]);
                        [-1.0 / (2.0 * v), m / v]
                    })
                    .collect()
            })
            .collect(),
    };
    let rows = columns.first().map_or(0, Vec::len);
    let lambda = Matrix::from_fn(rows, columns.len(), |i, l| columns[l][i]);
    Ok(variability_check(&lambda)?)
}

/// A trained model and what its trainer reported.
pub struct Trained {
    pub model: ModelFile,
    pub log: Option<TrainLog>,
    pub hmm: Option<HmmOutcome>,
    pub loglik: Option<f64>,
}

fn arch(cfg: &ExperimentConfig, nica: bool) -> NetArch {
    NetArch {
        layers: cfg.layers,
        order: cfg.p,
        nica,
        ..NetArch::default()
    }
}

/// Trains `cfg.method` on observations `x`. Initial weights and data
/// shuffles are seeded by `seed`.
pub fn train(cfg: &ExperimentConfig, x: &TimeSeries, seed: u64) -> Result<Trained, CliError> {
    let method = cfg.method()?;
    let sgd = sgd_config(cfg, method, seed);
    let plain = |model, log| Trained {
        model,
        log: Some(log),
        hmm: None,
        loglik: None,
    };
    Ok(match method {
        Method::Gcl | Method::NicaGcl => {
            let nica = method == Method::NicaGcl;
            let u: Vec<usize> = (0..x.len()).collect();
            let data = build_contrastive_dataset(x, &u, cfg.p, seed)?;
            let gcl = GclConfig {
                arch: arch(cfg, nica),
                num_freq: cfg.num_freq,
                sgd,
                init_seed: seed,
                ..GclConfig::default()
            };
            let (m, log) = train_gcl(&data, &gcl)?;
            plain(if nica { ModelFile::NicaGcl(m) } else { ModelFile::Gcl(m) }, log)
        }
        Method::Tcl | Method::NicaTcl => {
            let nica = method == Method::NicaTcl;
            let labels = segment_labels(x.len(), cfg.segments)?;
            let tcl = TclConfig {
                arch: arch(cfg, nica),
                sgd,
                init_seed: seed,
            };
            let out = train_tcl(x, &labels, &tcl)?;
            plain(
                if nica {
                    ModelFile::NicaTcl(out.model)
                } else {
                    ModelFile::Tcl(out.model)
                },
                out.log,
            )
        }
        Method::Adnvar => {
            let ad = AdnvarConfig {
                arch: NetArch {
                    layers: cfg.layers + 1,
                    activation: Activation::leaky_relu(0.2),
                    ..arch(cfg, false)
                },
                sgd,
                init_seed: seed,
                num_segments: cfg.segments,
            };
            let (m, log) = fit_adnvar(x, &ad)?;
            plain(ModelFile::Adnvar(m), log)
        }
        Method::Nsvica => {
            let (m, _) = nsvica(x, cfg.segments)?;
            Trained {
                model: ModelFile::Nsvica(m),
                log: None,
                hmm: None,
                loglik: None,
            }
        }
        Method::Hmm => {
            let mut hmm = HmmConfig {
                num_states: cfg.states,
                restarts: cfg.restarts,
                max_iters: cfg.max_iters,
                seed,
                threads: cfg.threads,
                ..HmmConfig::default()
            };
            hmm.arch.layers = cfg.layers;
            hmm.arch.order = cfg.p;
            if let Some(e) = cfg.epochs {
                hmm.tcl_init.sgd.epochs = e;
            }
            if let Some(lr) = cfg.lr {
                hmm.tcl_init.sgd.lr = lr;
            }
            let out = train_hmm_em(x, &hmm)?;
            Trained {
                model: ModelFile::Hmm(out.model.clone()),
                log: None,
                loglik: Some(out.model.final_loglik),
                hmm: Some(out),
            }
        }
    })
}

/// Score of one run; `report` is absent without true innovations.
pub struct Scored {
    pub s_hat: TimeSeries,
    pub report: Option<EvalReport>,
}

pub fn score(model: &ModelFile, x: &TimeSeries, s: Option<&TimeSeries>) -> Result<Scored, CliError> {
    let s_hat = model.extract(x)?;
    let report = s.map(|s| evaluate(s, &s_hat)).transpose()?;
    Ok(Scored { s_hat, report })
}

/// Generate, train and score one seeded run, timing the training and
/// extraction.
pub fn run_once(cfg: &ExperimentConfig, seed: u64) -> Result<(Trained, Scored, f64), CliError> {
    let data = generate(cfg, seed)?;
    let start = Instant::now();
    let trained = train(cfg, &data.x, seed)?;
    let scored = score(&trained.model, &data.x, Some(&data.s))?;
    Ok((trained, scored, start.elapsed().as_secs_f64()))
}
