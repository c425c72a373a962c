//! Library of optimised search distributions kept as experiential priors.
//!
//! One JSON document per prior. Every `f64` in the distribution and the loss
//! fields is written as a decimal string with 17 significant digits, which
//! round-trips binary64 exactly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::record::RunRecord;
use crate::network::NetworkSpec;
use crate::problems::ProblemSpec;
use crate::xnes::{log_abs_det, SearchDistribution};
use nalgebra::{DMatrix, DVector};

pub const FORMAT_VERSION: u32 = 1;
pub const EXTENSION: &str = ".prior.json";

/// Decimal-string encoding used for every float in a prior document.
mod dec17 {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn encode(x: f64) -> String {
        format!("{x:.16e}")
    }

    pub fn decode(s: &str) -> Result<f64, std::num::ParseFloatError> {
        s.parse::<f64>()
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&encode(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        let s = String::deserialize(d)?;
        decode(&s).map_err(D::Error::custom)
    }

    pub mod vec {
        use super::*;
        use serde::ser::SerializeSeq;

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(v.len()))?;
            for x in v {
                seq.serialize_element(&encode(*x))?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            let raw = Vec::<String>::deserialize(d)?;
            raw.iter().map(|s| decode(s).map_err(D::Error::custom)).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorDocument {
    pub format_version: u32,
    pub problem_id: String,
    pub problem_label: String,
    pub problem: ProblemSpec,
    pub network: NetworkSpec,
    pub d: usize,
    pub seed: u64,
    #[serde(with = "dec17")]
    pub final_train_loss: f64,
    #[serde(with = "dec17")]
    pub final_test_loss: f64,
    #[serde(with = "dec17::vec")]
    pub mu: Vec<f64>,
    /// `d × d`, row-major.
    #[serde(with = "dec17::vec")]
    pub a_mat: Vec<f64>,
    pub created: String,
}

impl PriorDocument {
    pub fn from_distribution(
        problem: &ProblemSpec,
        network: &NetworkSpec,
        sd: &SearchDistribution,
        seed: u64,
        final_train_loss: f64,
        final_test_loss: f64,
    ) -> Self {
        let d = sd.dim();
        let mut a_mat = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                a_mat.push(sd.a[(i, j)]);
            }
        }
        PriorDocument {
            format_version: FORMAT_VERSION,
            problem_id: problem.id().to_string(),
            problem_label: problem.label(),
            problem: problem.clone(),
            network: network.clone(),
            d,
            seed,
            final_train_loss,
            final_test_loss,
            mu: sd.mu.iter().copied().collect(),
            a_mat,
            created: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        }
    }

    /// Build from a finished evolutionary run.
    pub fn from_run(rec: &RunRecord) -> Result<Self> {
        let (Some(problem), Some(network), Some(dist)) = (&rec.problem_spec, &rec.network, &rec.final_distribution)
        else {
            return Err(Error::MalformedPrior(
                "run record carries no problem, network or final distribution".into(),
            ));
        };
        let sd = dist.to_distribution()?;
        Ok(Self::from_distribution(problem, network, &sd, rec.seed, rec.final_train_loss, rec.final_test_loss))
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::MalformedPrior(format!("unsupported format_version {}", self.format_version)));
        }
        if self.mu.len() != self.d || self.a_mat.len() != self.d * self.d {
            return Err(Error::MalformedPrior(format!(
                "d = {} but mu has {} and a_mat {} entries",
                self.d,
                self.mu.len(),
                self.a_mat.len()
            )));
        }
        if self.network.param_count() != self.d {
            return Err(Error::MalformedPrior(format!(
                "network has {} weights but d = {}",
                self.network.param_count(),
                self.d
            )));
        }
        if self.mu.iter().chain(&self.a_mat).any(|v| !v.is_finite()) {
            return Err(Error::MalformedPrior("non-finite mean or transform entry".into()));
        }
        log_abs_det(&self.a_matrix()).map_err(|_| Error::MalformedPrior("a_mat is singular".into()))?;
        Ok(())
    }

    pub fn a_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.d, self.d, &self.a_mat)
    }

    pub fn distribution(&self) -> Result<SearchDistribution> {
        SearchDistribution::new(DVector::from_column_slice(&self.mu), self.a_matrix())
    }

    /// `<problem-id>__<constants-hash>__seed<seed>.prior.json`
    pub fn file_name(&self) -> String {
        let digest = Sha256::digest(self.problem_label.as_bytes());
        let hash = hex::encode(&digest[..6]);
        format!("{}__{}__seed{}{}", self.problem_id, hash, self.seed, EXTENSION)
    }
}

/// Write `bytes` next to `path` and rename into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_prior(doc: &PriorDocument, path: &Path) -> Result<()> {
    doc.validate()?;
    let text = serde_json::to_string_pretty(doc)?;
    write_atomic(path, text.as_bytes())
}

/// Save into a library directory under the canonical file name.
pub fn save_to_library(doc: &PriorDocument, dir: &Path) -> Result<PathBuf> {
    let path = dir.join(doc.file_name());
    save_prior(doc, &path)?;
    Ok(path)
}

pub fn load_prior(path: &Path) -> Result<PriorDocument> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: PriorDocument =
        serde_json::from_str(&text).map_err(|e| Error::MalformedPrior(format!("{}: {e}", path.display())))?;
    doc.validate()?;
    Ok(doc)
}

/// Load a prior for a run whose search space has `d` dimensions.
pub fn load_prior_for(path: &Path, d: usize) -> Result<PriorDocument> {
    let doc = load_prior(path)?;
    if doc.d != d {
        return Err(Error::DimensionMismatch { what: "prior dimension", expected: d, got: doc.d });
    }
    Ok(doc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorSummary {
    pub path: PathBuf,
    pub problem_id: String,
    pub problem_label: String,
    pub d: usize,
    pub seed: u64,
    pub final_test_loss: f64,
}

/// Summaries of every prior in `dir`, sorted by problem id then test loss.
pub fn list_library(dir: &Path) -> Result<Vec<PriorSummary>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_prior = path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(EXTENSION));
        if !is_prior {
            continue;
        }
        let doc = load_prior(&path)?;
        out.push(PriorSummary {
            path,
            problem_id: doc.problem_id,
            problem_label: doc.problem_label,
            d: doc.d,
            seed: doc.seed,
            final_test_loss: doc.final_test_loss,
        });
    }
    out.sort_by(|a, b| {
        a.problem_id
            .cmp(&b.problem_id)
            .then(a.final_test_loss.total_cmp(&b.final_test_loss))
            .then(a.path.cmp(&b.path))
    });
    Ok(out)
}
