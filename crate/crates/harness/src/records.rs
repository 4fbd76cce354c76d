//! The run record: one self-contained, schema-versioned JSON artifact per
//! matrix cell, holding everything downstream reports need without
//! recomputation.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use plab_core::metrics::{DepthProfile, MetricKind, SlopeFit};
use plab_core::objectives::ObjectiveKind;
use plab_core::trainer::Condition;

use crate::HarnessError;

/// Schema tag carried by every run record.
pub const RECORD_VERSION: &str = "plab.run_record.v1";

/// Identifies one cell of the run matrix.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub model: String,
    pub objective: ObjectiveKind,
    pub condition: Condition,
    pub seed: u64,
}

impl CellKey {
    /// Filesystem-safe stem for this cell's artifacts.
    pub fn file_stem(&self) -> String {
        format!(
            "{}.{}.{}.seed{}",
            self.model,
            self.objective.name(),
            self.condition.name(),
            self.seed
        )
    }
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}:{}:{}",
            self.model,
            self.objective.name(),
            self.condition.name(),
            self.seed
        )
    }
}

/// Compact description of a loss trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub steps: usize,
    pub initial: f64,
    pub r#final: f64,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl LossSummary {
    pub fn from_trace(losses: &[f64]) -> Option<Self> {
        let (&initial, &last) = (losses.first()?, losses.last()?);
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for &l in losses {
            min = min.min(l);
            max = max.max(l);
            sum += l;
        }
        Some(Self {
            steps: losses.len(),
            initial,
            r#final: last,
            min,
            max,
            mean: sum / losses.len() as f64,
        })
    }
}

/// What the shared pretraining stage did to this cell's base model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainBrief {
    pub objective: ObjectiveKind,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// The per-metric least-squares depth slope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSlope {
    pub metric: MetricKind,
    pub fit: SlopeFit,
}

/// Everything one matrix cell produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: String,
    /// Hash of the experiment spec (output directory excluded).
    pub spec_hash: String,
    pub cell: CellKey,
    /// Hash of the frozen probe set the profiles were measured on.
    pub probe_hash: String,
    pub pretrain: PretrainBrief,
    /// Relative depths the profiles were captured at, ascending.
    pub depths: Vec<f64>,
    /// Fine-tuning loss per optimizer step.
    pub losses: Vec<f64>,
    pub loss_summary: LossSummary,
    /// Before/after drift per metric, one point per depth.
    pub profiles: Vec<DepthProfile>,
    pub slopes: Vec<MetricSlope>,
    /// Per-depth fractions of total drift under the similarity-based metric;
    /// absent when the profile is identically zero.
    pub normalized_cka: Option<Vec<f64>>,
    pub final_fraction_cka: Option<f64>,
    /// Per-step, per-depth-group relative update sizes; recorded only for
    /// the equal-step condition, empty otherwise.
    pub trust_ratio_trace: Vec<Vec<Option<f64>>>,
    /// Smallest cosine, over all steps and depth groups, between the
    /// optimizer's proposed update and the applied update (1 when no policy
    /// bent a direction).
    pub direction_cos_min: f64,
    /// Wall-clock seconds the cell took; excluded from the canonical payload.
    pub wall_time_s: f64,
}

impl RunRecord {
    /// The record with volatile fields zeroed, serialized canonically.
    /// Byte-identical across reruns of the same cell with the same spec.
    pub fn canonical_payload(&self) -> Result<Vec<u8>, HarnessError> {
        let mut stable = self.clone();
        stable.wall_time_s = 0.0;
        let mut bytes = serde_json::to_vec_pretty(&stable)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// The slope fit for one metric, if recorded.
    pub fn slope_for(&self, metric: MetricKind) -> Option<&SlopeFit> {
        self.slopes
            .iter()
            .find(|s| s.metric == metric)
            .map(|s| &s.fit)
    }

    /// The profile for one metric, if recorded.
    pub fn profile_for(&self, metric: MetricKind) -> Option<&DepthProfile> {
        self.profiles.iter().find(|p| p.metric == metric)
    }
}

/// A cell that failed, preserved so the rest of the matrix can continue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell: CellKey,
    pub error: String,
    /// Loss trace up to the failure, when training got that far.
    pub losses: Vec<f64>,
}

impl CellFailure {
    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}
