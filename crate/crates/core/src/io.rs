//! On-disk formats: series CSVs, dataset bundles and tagged model files.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! written series reads back bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{AdnvarModel, NsvicaModel};
use crate::contrastive::{GclModel, TclModel};
use crate::error::{shape_err, Error, Result};
use crate::hmm::HmmModel;
use crate::linalg::Matrix;
use crate::series::TimeSeries;
use crate::simgen::{Dataset, GroundTruth};

pub const X_FILE: &str = "x.csv";
pub const S_FILE: &str = "s.csv";
pub const U_FILE: &str = "u.csv";
pub const TRUTH_FILE: &str = "truth.json";

/// Writes `series` with a header `{prefix}0,{prefix}1,…`.
pub fn write_series_csv(path: &Path, series: &TimeSeries, prefix: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((0..series.dim()).map(|i| format!("{prefix}{i}")))?;
    for t in 0..series.len() {
        w.write_record(series.at(t).iter().map(f64::to_string))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_series_csv(path: &Path) -> Result<TimeSeries> {
    let mut r = csv::Reader::from_path(path)?;
    let dim = r.headers()?.len();
    let mut data = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != dim {
            return Err(shape_err(
                format!("{dim} columns"),
                format!("{} on data row {}", rec.len(), line + 1),
            ));
        }
        for field in rec.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{}: bad number {field:?}", path.display())))?;
            data.push(v);
        }
    }
    let rows = if dim == 0 { 0 } else { data.len() / dim };
    Ok(TimeSeries::new(Matrix::from_vec(rows, dim, data)?))
}

pub fn write_labels_csv(path: &Path, labels: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["u"])?;
    for u in labels {
        w.write_record([u.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels_csv(path: &Path) -> Result<Vec<usize>> {
    let mut r = csv::Reader::from_path(path)?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            let field = rec.get(0).unwrap_or("");
            field
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{}: bad label {field:?}", path.display())))
        })
        .collect()
}

/// A dataset directory as read back from disk. Only `x.csv` is required;
/// real recordings have no innovations or ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub x: TimeSeries,
    pub s: Option<TimeSeries>,
    pub u: Option<Vec<usize>>,
    pub truth: Option<GroundTruth>,
}

pub fn write_bundle(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_series_csv(&dir.join(X_FILE), &data.x, "x")?;
    write_series_csv(&dir.join(S_FILE), &data.s, "s")?;
    write_labels_csv(&dir.join(U_FILE), &data.u)?;
    fs::write(dir.join(TRUTH_FILE), serde_json::to_string_pretty(&data.truth)?)?;
    Ok(())
}

pub fn read_bundle(dir: &Path) -> Result<Bundle> {
    let optional = |name: &str| -> Option<PathBuf> {
        let p = dir.join(name);
        p.is_file().then_some(p)
    };
    let x = read_series_csv(&dir.join(X_FILE))?;
    let s = optional(S_FILE).map(|p| read_series_csv(&p)).transpose()?;
    if let Some(s) = &s {
        if s.len() != x.len() || s.dim() != x.dim() {
            return Err(shape_err(
                format!("{}x{} innovations", x.len(), x.dim()),
                format!("{}x{}", s.len(), s.dim()),
            ));
        }
    }
    let u = optional(U_FILE).map(|p| read_labels_csv(&p)).transpose()?;
    let truth = optional(TRUTH_FILE)
        .map(|p| -> Result<GroundTruth> { Ok(serde_json::from_str(&fs::read_to_string(p)?)?) })
        .transpose()?;
    Ok(Bundle { x, s, u, truth })
}

/// Any trained model, tagged by method name in its JSON form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model", rename_all = "kebab-case")]
pub enum ModelFile {
    Gcl(GclModel),
    Tcl(TclModel),
    Hmm(HmmModel),
    Adnvar(AdnvarModel),
    Nsvica(NsvicaModel),
    NicaGcl(GclModel),
    NicaTcl(TclModel),
}

impl ModelFile {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelFile::Gcl(_) => "gcl",
            ModelFile::Tcl(_) => "tcl",
            ModelFile::Hmm(_) => "hmm",
            ModelFile::Adnvar(_) => "adnvar",
            ModelFile::Nsvica(_) => "nsvica",
            ModelFile::NicaGcl(_) => "nica-gcl",
            ModelFile::NicaTcl(_) => "nica-tcl",
        }
    }

    /// Estimated innovations. Autoregressive methods drop the first `p`
    /// points; NSVICA returns one row per observation.
    pub fn extract(&self, x: &TimeSeries) -> Result<TimeSeries> {
        match self {
            ModelFile::Gcl(m) | ModelFile::NicaGcl(m) => m.extract(x),
            ModelFile::Tcl(m) | ModelFile::NicaTcl(m) => m.extract(x),
            ModelFile::Hmm(m) => m.extract(x),
            ModelFile::Adnvar(m) => m.extract(x),
            ModelFile::Nsvica(m) => m.transform(x),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::{generate_dataset, DatasetConfig, InnovationKind, NvarConfig};

    fn small_dataset(kind: InnovationKind) -> Dataset {
        let cfg = DatasetConfig {
            nvar: NvarConfig::new(2, 1),
            len: 200,
            innovations: kind,
        };
        generate_dataset(&cfg, 3).unwrap()
    }

    #[test]
    fn bundle_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let data = small_dataset(InnovationKind::Hmm { num_states: 3 });
        write_bundle(dir.path(), &data).unwrap();
        let back = read_bundle(dir.path()).unwrap();
        assert_eq!(back.x, data.x);
        assert_eq!(back.s.as_ref(), Some(&data.s));
        assert_eq!(back.u.as_ref(), Some(&data.u));
        assert_eq!(back.truth.as_ref(), Some(&data.truth));
    }

    #[test]
    fn observations_alone_are_a_bundle() {
        let dir = tempfile::tempdir().unwrap();
        let data = small_dataset(InnovationKind::Nonstationary { num_freq: 4 });
        write_series_csv(&dir.path().join(X_FILE), &data.x, "x").unwrap();
        let back = read_bundle(dir.path()).unwrap();
        assert_eq!(back.x, data.x);
        assert!(back.s.is_none() && back.u.is_none() && back.truth.is_none());
    }

    #[test]
    fn ragged_csv_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        fs::write(&p, "a,b\n1,2\n3,x\n").unwrap();
        assert!(read_series_csv(&p).is_err());
    }

    #[test]
    fn model_file_is_tagged_by_kind() {
        let data = small_dataset(InnovationKind::Nonstationary { num_freq: 4 });
        let (m, _) = crate::baselines::nsvica(&data.x, 4).unwrap();
        let file = ModelFile::Nsvica(m);
        let json = serde_json::to_value(&file).unwrap();
        assert_eq!(json["kind"], "nsvica");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.json");
        file.save(&p).unwrap();
        let back = ModelFile::load(&p).unwrap();
        assert_eq!(back, file);
        assert_eq!(back.extract(&data.x).unwrap().len(), 200);
    }
}
