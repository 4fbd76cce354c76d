//! The experiment specification: one JSON document that fully determines a
//! run matrix, plus validation and a content hash that identifies the
//! experiment independently of where its outputs land.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use plab_core::models::{AdapterConfig, BlockKind, ModelConfig, SpecialTokens};
use plab_core::objectives::{ObjectiveConfig, ObjectiveKind};
use plab_core::trainer::{Condition, OptimizerConfig, TrainConfig};

use crate::HarnessError;

/// Schema tag carried by every experiment file and run record.
pub const SPEC_VERSION: &str = "plab.experiment.v1";

/// Relative depths profiled by default.
pub const DEFAULT_DEPTHS: [f64; 7] = [0.10, 0.25, 0.40, 0.60, 0.75, 0.90, 1.00];

/// Default number of held-out probe rows.
pub const DEFAULT_PROBE_COUNT: usize = 290;

fn default_version() -> String {
    SPEC_VERSION.to_string()
}

fn default_depths() -> Vec<f64> {
    DEFAULT_DEPTHS.to_vec()
}

fn default_probe_count() -> usize {
    DEFAULT_PROBE_COUNT
}

fn default_probe_seed() -> u64 {
    13
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("plab-out")
}

/// A model architecture with the name it carries through records and reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedModel {
    pub name: String,
    pub config: ModelConfig,
}

/// Where the corpus comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CorpusSpec {
    /// Synthetic rows drawn from a Zipf law over `alphabet` symbols.
    ZipfSynthetic {
        sequences: usize,
        seq_len: usize,
        alphabet: usize,
        exponent: f64,
        seed: u64,
    },
    /// A text file tokenized as raw bytes and chunked into rows.
    ByteText { path: PathBuf, seq_len: usize },
    /// A pre-tokenized file in the corpus line format.
    TokenFile { path: PathBuf },
}

/// The shared pretraining stage that produces each base model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSpec {
    pub objective: ObjectiveKind,
    pub steps: usize,
    pub batch_rows: usize,
    pub accumulation: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        Self {
            objective: ObjectiveKind::Mlm,
            steps: 3_000,
            batch_rows: 32,
            accumulation: 1,
            optimizer: OptimizerConfig {
                lr: 3e-4,
                ..OptimizerConfig::default()
            },
        }
    }
}

/// The per-cell fine-tuning stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSpec {
    pub steps: usize,
    pub batch_rows: usize,
    pub accumulation: usize,
    pub optimizer: OptimizerConfig,
    /// Geometric per-group decay for the depth-decaying conditions.
    pub lr_decay: f64,
    /// Target relative update size for the equal-step condition.
    pub equal_step_tau: f64,
    pub freeze_interior_embeddings: bool,
    pub divergence_factor: f64,
    pub divergence_patience: usize,
}

impl Default for FinetuneSpec {
    fn default() -> Self {
        let defaults = TrainConfig::new(Condition::Standard);
        Self {
            steps: 300,
            batch_rows: 32,
            accumulation: 4,
            optimizer: OptimizerConfig::default(),
            lr_decay: defaults.lr_decay,
            equal_step_tau: defaults.equal_step_tau,
            freeze_interior_embeddings: defaults.freeze_interior_embeddings,
            divergence_factor: defaults.divergence_factor,
            divergence_patience: defaults.divergence_patience,
        }
    }
}

impl FinetuneSpec {
    /// The trainer configuration for one condition of this stage.
    pub fn train_config(&self, condition: Condition) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer,
            condition,
            lr_decay: self.lr_decay,
            equal_step_tau: self.equal_step_tau,
            freeze_interior_embeddings: self.freeze_interior_embeddings,
            divergence_factor: self.divergence_factor,
            divergence_patience: self.divergence_patience,
        }
    }
}

/// The training-free objective-distance stage, run on pretrained models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceSpec {
    /// Objective whose gradient matrix anchors the report's reference row.
    pub reference: ObjectiveKind,
    /// Batches in the shared probe schedule.
    pub batches: usize,
    pub rows_per_batch: usize,
    pub row_len: usize,
    pub seed: u64,
    /// Random-projection dimensions for the sketched variants; empty skips
    /// the sketches.
    pub jl_dims: Vec<usize>,
    pub jl_seed: u64,
}

impl Default for DistanceSpec {
    fn default() -> Self {
        Self {
            reference: ObjectiveKind::Mlm,
            batches: 64,
            rows_per_batch: 8,
            row_len: 32,
            seed: 11,
            jl_dims: vec![32, 16],
            jl_seed: 7,
        }
    }
}

/// Everything that determines one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    #[serde(default = "default_version")]
    pub version: String,
    pub models: Vec<NamedModel>,
    pub objectives: Vec<ObjectiveKind>,
    pub conditions: Vec<Condition>,
    pub seeds: Vec<u64>,
    pub corpus: CorpusSpec,
    #[serde(default = "default_probe_count")]
    pub probe_count: usize,
    #[serde(default = "default_probe_seed")]
    pub probe_seed: u64,
    #[serde(default = "default_depths")]
    pub depths: Vec<f64>,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub pretrain: PretrainSpec,
    #[serde(default)]
    pub finetune: FinetuneSpec,
    #[serde(default)]
    pub distance: DistanceSpec,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

impl ExperimentSpec {
    /// A small, runnable example configuration.
    pub fn example() -> Self {
        Self {
            version: default_version(),
            models: vec![NamedModel {
                name: "encoder-8x64".to_string(),
                config: ModelConfig {
                    vocab_size: 256,
                    max_seq_len: 32,
                    d_model: 64,
                    n_layers: 8,
                    n_heads: 4,
                    d_ff: 256,
                    block: BlockKind::Sequential,
                    dropout: 0.1,
                    adapters: Some(AdapterConfig {
                        rank: 4,
                        alpha: 8.0,
                        ..AdapterConfig::default()
                    }),
                    tied_lm_head: true,
                },
            }],
            objectives: vec![ObjectiveKind::Mlm, ObjectiveKind::CausalSpan],
            conditions: vec![Condition::Standard, Condition::EqualStep],
            seeds: vec![0, 1],
            corpus: CorpusSpec::ZipfSynthetic {
                sequences: 1_200,
                seq_len: 32,
                alphabet: 250,
                exponent: 1.1,
                seed: 1,
            },
            probe_count: DEFAULT_PROBE_COUNT,
            probe_seed: default_probe_seed(),
            depths: default_depths(),
            objective: ObjectiveConfig::default(),
            pretrain: PretrainSpec::default(),
            finetune: FinetuneSpec::default(),
            distance: DistanceSpec::default(),
            out_dir: default_out_dir(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path)?;
        let spec: Self = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
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

    /// SHA-256 hex digest of the spec with the output directory blanked, so
    /// the same experiment hashes identically wherever its results land.
    pub fn hash(&self) -> String {
        let mut content = self.clone();
        content.out_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&content).expect("spec serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Smallest content-token limit over all models.
    pub fn min_content_limit(&self) -> usize {
        self.models
            .iter()
            .map(|m| SpecialTokens::content_limit(m.config.vocab_size))
            .min()
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::BadConfig(msg));

        if self.version != SPEC_VERSION {
            return bad(format!(
                "unsupported spec version '{}'; this build reads '{SPEC_VERSION}'",
                self.version
            ));
        }
        if self.models.is_empty() {
            return bad("at least one model is required".into());
        }
        if self.objectives.is_empty() {
            return bad("at least one objective is required".into());
        }
        if self.conditions.is_empty() {
            return bad("at least one condition is required".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }

        let mut names: Vec<&str> = self.models.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.models.len() {
            return bad("model names must be unique".into());
        }
        if self
            .models
            .iter()
            .any(|m| m.name.is_empty() || m.name.contains([':', '/', '.']))
        {
            return bad("model names must be non-empty and free of ':', '/', '.'".into());
        }
        for list_len in [
            dedup_len(&self.objectives),
            dedup_len(&self.conditions),
            dedup_len(&self.seeds),
        ] {
            if list_len.0 != list_len.1 {
                return bad("objectives, conditions, and seeds must each be unique".into());
            }
        }

        for m in &self.models {
            let c = &m.config;
            if c.vocab_size <= SpecialTokens::RESERVED {
                return bad(format!(
                    "model '{}': vocab_size {} leaves no room for content tokens",
                    m.name, c.vocab_size
                ));
            }
            if c.n_heads == 0 || c.d_model % c.n_heads != 0 {
                return bad(format!(
                    "model '{}': d_model {} must be a positive multiple of n_heads {}",
                    m.name, c.d_model, c.n_heads
                ));
            }
            if c.n_layers == 0 || c.max_seq_len < 2 {
                return bad(format!(
                    "model '{}': needs n_layers >= 1 and max_seq_len >= 2",
                    m.name
                ));
            }
        }

        if self
            .conditions
            .iter()
            .any(|c| c.requires_adapters())
            && self.models.iter().any(|m| m.config.adapters.is_none())
        {
            return bad(
                "the adapter-only condition is listed, so every model needs adapters".into(),
            );
        }

        if self.depths.len() < 2 {
            return bad("at least two depths are required to fit a slope".into());
        }
        let mut prev = 0.0;
        for &d in &self.depths {
            if !(d.is_finite() && d > prev && d <= 1.0) {
                return bad(format!(
                    "depths must be strictly increasing within (0, 1]; offending value {d}"
                ));
            }
            prev = d;
        }

        if self.probe_count < 3 {
            return bad("probe_count must be at least 3".into());
        }

        match &self.corpus {
            CorpusSpec::ZipfSynthetic {
                sequences,
                seq_len,
                alphabet,
                exponent,
                ..
            } => {
                if *seq_len < 2 {
                    return bad("zipf corpus: seq_len must be at least 2".into());
                }
                if !(exponent.is_finite() && *exponent > 0.0) {
                    return bad("zipf corpus: exponent must be finite and positive".into());
                }
                if *alphabet > self.min_content_limit() {
                    return bad(format!(
                        "zipf corpus: alphabet {} exceeds the smallest model's content-token \
                         limit {}",
                        alphabet,
                        self.min_content_limit()
                    ));
                }
                let need = self.probe_count + self.finetune.batch_rows.max(1);
                if *sequences < need {
                    return bad(format!(
                        "zipf corpus: {sequences} sequences cannot cover {} probes plus one \
                         training batch (need at least {need})",
                        self.probe_count
                    ));
                }
            }
            CorpusSpec::ByteText { seq_len, .. } => {
                if *seq_len < 2 {
                    return bad("byte corpus: seq_len must be at least 2".into());
                }
                if self.min_content_limit() < 256 {
                    return bad(
                        "byte corpus: every model needs room for 256 byte tokens plus the \
                         reserved ids"
                            .into(),
                    );
                }
            }
            // Token files are parsed at materialization time; token-range
            // problems surface per cell so one bad pairing cannot sink the
            // rest of the matrix.
            CorpusSpec::TokenFile { .. } => {}
        }

        let needs_pairs = |k: ObjectiveKind| k.is_contrastive() || k == ObjectiveKind::Nsp;
        for (stage, batch_rows, accumulation, steps) in [
            (
                "pretrain",
                self.pretrain.batch_rows,
                self.pretrain.accumulation,
                self.pretrain.steps,
            ),
            (
                "finetune",
                self.finetune.batch_rows,
                self.finetune.accumulation,
                self.finetune.steps,
            ),
        ] {
            if steps == 0 || batch_rows == 0 || accumulation == 0 {
                return bad(format!(
                    "{stage}: steps, batch_rows, and accumulation must all be positive"
                ));
            }
            if batch_rows % accumulation != 0 {
                return bad(format!(
                    "{stage}: accumulation {accumulation} must divide batch_rows {batch_rows}"
                ));
            }
        }
        if needs_pairs(self.pretrain.objective)
            && self.pretrain.batch_rows / self.pretrain.accumulation < 2
        {
            return bad("pretrain: the chosen objective needs at least 2 rows per micro-batch".into());
        }
        if self.objectives.iter().copied().any(needs_pairs)
            && self.finetune.batch_rows / self.finetune.accumulation < 2
        {
            return bad(
                "finetune: pair-based objectives need at least 2 rows per micro-batch".into(),
            );
        }
        if !(self.finetune.lr_decay > 0.0 && self.finetune.lr_decay <= 1.0) {
            return bad("finetune: lr_decay must lie in (0, 1]".into());
        }
        if !(self.finetune.equal_step_tau.is_finite() && self.finetune.equal_step_tau > 0.0) {
            return bad("finetune: equal_step_tau must be finite and positive".into());
        }

        let min_seq = self
            .models
            .iter()
            .map(|m| m.config.max_seq_len)
            .min()
            .expect("models checked non-empty");
        if self.distance.row_len < 2 || self.distance.row_len > min_seq {
            return bad(format!(
                "distance: row_len {} must lie in [2, {min_seq}]",
                self.distance.row_len
            ));
        }
        if self.distance.batches < 2 || self.distance.rows_per_batch < 2 {
            return bad("distance: needs at least 2 batches of at least 2 rows".into());
        }
        let min_d = self
            .models
            .iter()
            .map(|m| m.config.d_model)
            .min()
            .expect("models checked non-empty");
        if self
            .distance
            .jl_dims
            .iter()
            .any(|&k| k == 0 || k >= min_d)
        {
            return bad(format!(
                "distance: every sketch dimension must lie in [1, {})",
                min_d
            ));
        }

        Ok(())
    }
}

fn dedup_len<T: Clone + PartialEq + std::fmt::Debug + serde::Serialize>(
    items: &[T],
) -> (usize, usize) {
    let mut seen: Vec<String> = items
        .iter()
        .map(|x| serde_json::to_string(x).expect("list item serializes"))
        .collect();
    seen.sort_unstable();
    seen.dedup();
    (seen.len(), items.len())
}
