//! Experiment and sweep settings: JSON file plus `--set key=value` overrides.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Estimation method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Gcl,
    Tcl,
    Hmm,
    Adnvar,
    Nsvica,
    NicaGcl,
    NicaTcl,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Gcl,
        Method::Tcl,
        Method::Hmm,
        Method::Adnvar,
        Method::Nsvica,
        Method::NicaGcl,
        Method::NicaTcl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Gcl => "gcl",
            Method::Tcl => "tcl",
            Method::Hmm => "hmm",
            Method::Adnvar => "adnvar",
            Method::Nsvica => "nsvica",
            Method::NicaGcl => "nica-gcl",
            Method::NicaTcl => "nica-tcl",
        }
    }

    /// Figure panel the method is plotted in.
    pub fn panel(self) -> &'static str {
        match self {
            Method::Gcl | Method::NicaGcl | Method::Adnvar => "gcl",
            Method::Tcl | Method::NicaTcl | Method::Nsvica => "tcl",
            Method::Hmm => "hmm",
        }
    }

    pub fn uses_segments(self) -> bool {
        matches!(self, Method::Tcl | Method::NicaTcl | Method::Nsvica | Method::Adnvar)
    }
}

impl FromStr for Method {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let known: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
            CliError::Usage(format!("unknown method {s:?} (expected one of {})", known.join(", ")))
        })
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One experiment: data shape, method and optimiser settings. Optimiser
/// fields left unset fall back to per-method defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
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
    pub num_freq: usize,
    pub seeds: Vec<u64>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub batch: Option<usize>,
    pub epochs: Option<usize>,
    pub restarts: usize,
    pub max_iters: usize,
    pub ar_gain: f64,
    /// Worker threads (HMM restarts, sweep runs); 0 uses all cores.
    pub threads: usize,
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: "tcl".into(),
            n: 5,
            layers: 1,
            len: 1 << 16,
            p: 1,
            segments: 64,
            states: 7,
            num_freq: 64,
            seeds: vec![0],
            lr: None,
            momentum: None,
            batch: None,
            epochs: None,
            restarts: 20,
            max_iters: 100,
            ar_gain: 0.7,
            threads: 0,
            data: None,
            model: None,
            out: None,
        }
    }
}

impl ExperimentConfig {
    pub fn method(&self) -> Result<Method, CliError> {
        self.method.parse()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let method = self.method()?;
        let bad = |msg: String| Err(CliError::Usage(msg));
        if self.n == 0 || self.layers == 0 || self.p == 0 {
            return bad("n, L and p must be positive".into());
        }
        if self.len < 3 {
            return bad(format!("N = {} is too short", self.len));
        }
        if method.uses_segments() && self.segments < 2 {
            return bad(format!("method {method} needs segments >= 2"));
        }
        if method == Method::Hmm && self.states == 0 {
            return bad("method hmm needs C >= 1".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        let distinct: HashSet<_> = self.seeds.iter().collect();
        if distinct.len() != self.seeds.len() {
            return bad(format!("seeds must be distinct: {:?}", self.seeds));
        }
        Ok(())
    }

    /// Copy describing a single seeded run, with paths cleared.
    pub fn for_run(&self, seed: u64) -> Self {
        Self {
            seeds: vec![seed],
            data: None,
            model: None,
            out: None,
            ..self.clone()
        }
    }

    /// Short hex digest of the canonical JSON form. Object keys are sorted,
    /// so the hash ignores field order in the source file.
    pub fn hash(&self) -> String {
        config_hash(&serde_json::to_value(self).expect("config serialises"))
    }
}

/// Sweep grid: the Cartesian product of methods, depths, lengths and the
/// base config's seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    #[serde(flatten)]
    pub base: ExperimentConfig,
    pub methods: Vec<String>,
    #[serde(rename = "L_values")]
    pub layer_values: Vec<usize>,
    #[serde(rename = "N_values")]
    pub len_values: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            base: ExperimentConfig {
                seeds: vec![0, 1, 2],
                ..ExperimentConfig::default()
            },
            methods: vec!["tcl".into(), "nica-tcl".into()],
            layer_values: vec![1, 3],
            len_values: vec![1 << 12, 1 << 14],
        }
    }
}

impl SweepConfig {
    /// Every grid point, in method, L, N, seed order.
    pub fn runs(&self) -> Result<Vec<ExperimentConfig>, CliError> {
        let mut runs = Vec::new();
        for m in &self.methods {
            for &layers in &self.layer_values {
                for &len in &self.len_values {
                    for &seed in &self.base.seeds {
                        let cfg = ExperimentConfig {
                            method: m.clone(),
                            layers,
                            len,
                            ..self.base.for_run(seed)
                        };
                        cfg.validate()?;
                        runs.push(cfg);
                    }
                }
            }
        }
        Ok(runs)
    }
}

pub fn config_hash(value: &Value) -> String {
    let digest = Sha256::digest(value.to_string().as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Sets `key` (dotted for nested objects) to `raw`, read as JSON when it
/// parses and as a string otherwise.
pub fn apply_override(target: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {assignment:?}")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = target;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            *node = Value::Object(Default::default());
        }
        let map = node.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Err(CliError::Usage(format!("empty key in {assignment:?}")))
}

/// Reads an optional JSON config file, applies overrides in order and
/// deserialises. Fields absent from both keep their defaults.
pub fn load_config<T: Serialize + for<'de> Deserialize<'de> + Default>(
    file: Option<&Path>,
    sets: &[String],
) -> Result<T, CliError> {
    let defaults = serde_json::to_value(T::default())?;
    let mut value = match file {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => defaults.clone(),
    };
    for s in sets {
        apply_override(&mut value, s)?;
    }
    if let (Some(given), Some(known)) = (value.as_object(), defaults.as_object()) {
        if let Some(k) = given.keys().find(|k| !known.contains_key(*k)) {
            return Err(CliError::Usage(format!("unknown config key {k:?}")));
        }
    }
    serde_json::from_value(value).map_err(|e| CliError::Usage(format!("bad config: {e}")))
}
