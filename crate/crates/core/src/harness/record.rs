use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::NetworkSpec;
use crate::problems::ProblemSpec;
use crate::xnes::SearchDistribution;

/// Non-finite losses are stored as `null` and read back as `+∞`.
pub(crate) mod loss_value {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub evaluations: usize,
    #[serde(with = "loss_value")]
    pub best_train_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingRow {
    pub generation: usize,
    pub alpha_target: f64,
    pub alpha_sources: Vec<f64>,
}

/// A search distribution in plain vectors (`a` row-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredDistribution {
    pub d: usize,
    pub mu: Vec<f64>,
    pub a: Vec<f64>,
}

impl From<&SearchDistribution> for StoredDistribution {
    fn from(sd: &SearchDistribution) -> Self {
        let d = sd.dim();
        let mut a = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                a.push(sd.a[(i, j)]);
            }
        }
        StoredDistribution { d, mu: sd.mu.iter().copied().collect(), a }
    }
}

impl StoredDistribution {
    pub fn to_distribution(&self) -> Result<SearchDistribution> {
        if self.mu.len() != self.d || self.a.len() != self.d * self.d {
            return Err(Error::DimensionMismatch { what: "stored distribution", expected: self.d, got: self.mu.len() });
        }
        SearchDistribution::new(
            DVector::from_column_slice(&self.mu),
            DMatrix::from_row_slice(self.d, self.d, &self.a),
        )
    }
}

/// Everything one optimisation run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub algorithm: String,
    pub problem: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem_spec: Option<ProblemSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkSpec>,
    pub seed: u64,
    pub history: Vec<HistoryRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mixing: Vec<MixingRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub source_labels: Vec<String>,
    pub best_weights: Vec<f64>,
    #[serde(with = "loss_value")]
    pub final_train_loss: f64,
    #[serde(with = "loss_value")]
    pub final_test_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_mse: Option<f64>,
    pub evaluations: usize,
    pub generations: usize,
    pub stopped_on_target: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_distribution: Option<StoredDistribution>,
    pub wall_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl RunRecord {
    /// Best-so-far training loss after at most `evaluations` evaluations
    /// (`+∞` before the first row).
    pub fn best_train_at(&self, evaluations: usize) -> f64 {
        let idx = self.history.partition_point(|r| r.evaluations <= evaluations);
        if idx == 0 {
            f64::INFINITY
        } else {
            self.history[idx - 1].best_train_loss
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        crate::priors::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Check the record's structural invariants: strictly increasing
    /// evaluation counts and non-increasing best training loss.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        for w in self.history.windows(2) {
            if w[1].evaluations <= w[0].evaluations {
                return Err(format!("evaluation counts not increasing at {}", w[1].evaluations));
            }
            if w[1].best_train_loss > w[0].best_train_loss {
                return Err(format!("best training loss increased at {}", w[1].evaluations));
            }
        }
        Ok(())
    }
}
