//! Small decoder/encoder transformer models with named, grouped parameters.
//!
//! A [`Model`] is a flat store of named tensors plus a [`ModelConfig`]
//! describing the architecture. Parameter names follow a fixed dotted scheme
//! (`embeddings.token`, `layers.3.attn.wq`, `final_ln.gamma`, …) so that
//! training policies can address parameters by pattern, and each name maps to
//! a *depth group*: group `0` holds everything outside the blocks, group
//! `i + 1` holds block `i`. The forward pass lives in [`forward`] and builds
//! a fresh autograd tape per call.

mod forward;

pub use forward::{
    cls_pool_weights, last_token_pool_weights, mean_pool_weights, DepthCapture, DropoutMode,
    ForwardOptions, ForwardOutput, IdBatch,
};

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{GradError, Graph, Tensor, Value};

/// Epsilon used by every layer norm in the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("d_model {d_model} is not divisible by n_heads {n_heads}")]
    HeadsDontDivide { d_model: usize, n_heads: usize },

    #[error("vocabulary of {vocab} cannot hold {need} reserved specials plus content")]
    VocabTooSmall { vocab: usize, need: usize },

    #[error("config field {field} must be positive")]
    ZeroDimension { field: &'static str },

    #[error("adapter rank {rank} must be in 1..={d_model}")]
    BadAdapterRank { rank: usize, d_model: usize },

    #[error("sequence length {got} exceeds the model maximum {max}")]
    SequenceTooLong { got: usize, max: usize },

    #[error("token id {token} out of range for vocabulary {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("unknown parameter {0:?}")]
    UnknownParam(String),

    #[error("parameter {name} expects shape {expect:?}, got {got:?}")]
    ParamShape {
        name: String,
        expect: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("capture depth {0} outside (0, 1]")]
    BadDepth(f64),

    #[error("batch rows have unequal lengths")]
    RaggedBatch,

    #[error("batch is empty")]
    EmptyBatch,

    #[error("checkpoint is malformed: {0}")]
    BadCheckpoint(String),

    #[error(transparent)]
    Grad(#[from] GradError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Manifest(#[from] serde_json::Error),
}

/// How the two sub-blocks of a transformer block combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// `x ← x + drop(attn(ln1 x))`, then `x ← x + drop(mlp(ln2 x))`.
    Sequential,
    /// Both sub-blocks read the same input:
    /// `x ← x + drop(attn(ln1 x)) + drop(mlp(ln2 x))`.
    Parallel,
}

/// Low-rank adapter settings applied to the four attention projections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            dropout: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub block: BlockKind,
    /// Dropout rate shared by the embedding, attention-probability, and
    /// sub-block-output sites.
    pub dropout: f64,
    /// When set, the attention projections carry low-rank adapters.
    pub adapters: Option<AdapterConfig>,
    /// Tie the language-model head to the token embedding (logits = h·Eᵀ).
    pub tied_lm_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            max_seq_len: 32,
            d_model: 64,
            n_layers: 8,
            n_heads: 4,
            d_ff: 256,
            block: BlockKind::Sequential,
            dropout: 0.1,
            adapters: None,
            tied_lm_head: true,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn validate(&self) -> Result<(), ModelError> {
        for (field, v) in [
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
        ] {
            if v == 0 {
                return Err(ModelError::ZeroDimension { field });
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::HeadsDontDivide {
                d_model: self.d_model,
                n_heads: self.n_heads,
            });
        }
        if self.vocab_size < SpecialTokens::RESERVED + 1 {
            return Err(ModelError::VocabTooSmall {
                vocab: self.vocab_size,
                need: SpecialTokens::RESERVED,
            });
        }
        if let Some(a) = &self.adapters {
            if a.rank == 0 || a.rank > self.d_model {
                return Err(ModelError::BadAdapterRank {
                    rank: a.rank,
                    d_model: self.d_model,
                });
            }
        }
        Ok(())
    }
}

/// Reserved control-token ids, carved out of the top of the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialTokens {
    pub mask: usize,
    pub cls: usize,
    pub sep: usize,
    pub pad: usize,
}

impl SpecialTokens {
    /// Number of reserved ids at the top of the vocabulary.
    pub const RESERVED: usize = 4;

    pub fn for_vocab(vocab_size: usize) -> Self {
        Self {
            mask: vocab_size - 1,
            cls: vocab_size - 2,
            sep: vocab_size - 3,
            pad: vocab_size - 4,
        }
    }

    /// Largest id + 1 usable for ordinary content tokens.
    pub fn content_limit(vocab_size: usize) -> usize {
        vocab_size - Self::RESERVED
    }
}

/// Maps a relative depth in `(0, 1]` onto a one-based block index.
pub fn depth_to_layer_index(depth: f64, n_layers: usize) -> usize {
    ((depth * n_layers as f64).round() as usize).clamp(1, n_layers)
}

/// A transformer with named parameters stored as plain tensors.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: BTreeMap<String, Tensor>,
}

/// Per-parameter leaf/constant bindings on one tape, ready for a forward pass.
pub struct Binding {
    graph: Graph,
    values: BTreeMap<String, (Value, bool)>,
}

impl Binding {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn value(&self, name: &str) -> Result<&Value, ModelError> {
        self.values
            .get(name)
            .map(|(v, _)| v)
            .ok_or_else(|| ModelError::UnknownParam(name.to_string()))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.values.get(name).map(|&(_, t)| t).unwrap_or(false)
    }

    /// Names bound as trainable leaves, in sorted order.
    pub fn trainable_names(&self) -> Vec<String> {
        self.values
            .iter()
            .filter(|(_, (_, t))| *t)
            .map(|(n, _)| n.clone())
            .collect()
    }
}

impl Model {
    /// Builds a model with freshly initialized parameters: weight matrices
    /// and embeddings `N(0, 0.02)`, norms at identity, biases and the second
    /// adapter factor at zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut params = BTreeMap::new();
        for (name, shape) in param_layout(&config) {
            let n: usize = shape.iter().product();
            let data = match init_kind(&name) {
                InitKind::Zero => vec![0.0; n],
                InitKind::One => vec![1.0; n],
                InitKind::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
            };
            params.insert(name, Tensor::new(shape, data).expect("layout is consistent"));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Parameter names in sorted (deterministic) order.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn param(&self, name: &str) -> Result<&Tensor, ModelError> {
        self.params
            .get(name)
            .ok_or_else(|| ModelError::UnknownParam(name.to_string()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor, ModelError> {
        self.params
            .get_mut(name)
            .ok_or_else(|| ModelError::UnknownParam(name.to_string()))
    }

    pub fn set_param(&mut self, name: &str, tensor: Tensor) -> Result<(), ModelError> {
        let current = self.param(name)?;
        if current.shape() != tensor.shape() {
            return Err(ModelError::ParamShape {
                name: name.to_string(),
                expect: current.shape().to_vec(),
                got: tensor.shape().to_vec(),
            });
        }
        self.params.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Depth group of a parameter: `0` for everything outside the blocks,
    /// `i + 1` for `layers.i.*`.
    pub fn group_of(name: &str) -> usize {
        name.strip_prefix("layers.")
            .and_then(|rest| rest.split('.').next())
            .and_then(|idx| idx.parse::<usize>().ok())
            .map(|idx| idx + 1)
            .unwrap_or(0)
    }

    /// Total number of depth groups (`n_layers + 1`).
    pub fn num_groups(&self) -> usize {
        self.config.n_layers + 1
    }

    pub fn specials(&self) -> SpecialTokens {
        SpecialTokens::for_vocab(self.config.vocab_size)
    }

    /// Binds every parameter as a trainable leaf on `graph`.
    pub fn bind(&self, graph: &Graph) -> Result<Binding, ModelError> {
        self.bind_where(graph, |_| true)
    }

    /// Binds parameters on `graph`; names passing `trainable` become
    /// differentiable leaves, the rest become constants (no gradient work).
    pub fn bind_where(
        &self,
        graph: &Graph,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<Binding, ModelError> {
        let mut values = BTreeMap::new();
        for (name, tensor) in &self.params {
            let is_trainable = trainable(name);
            let value = if is_trainable {
                graph.leaf(tensor.clone())?
            } else {
                graph.constant(tensor.clone())?
            };
            values.insert(name.clone(), (value, is_trainable));
        }
        Ok(Binding {
            graph: graph.clone(),
            values,
        })
    }

    /// Serializes the model as `manifest.json` (config + ordered parameter
    /// table) plus `params.bin` (little-endian `f64` data in table order).
    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        std::fs::create_dir_all(dir)?;
        let entries: Vec<ManifestParam> = self
            .params
            .iter()
            .map(|(name, t)| ManifestParam {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect();
        let manifest = Manifest {
            schema: CHECKPOINT_SCHEMA,
            config: self.config.clone(),
            params: entries,
        };
        let mut json = serde_json::to_vec_pretty(&manifest)?;
        json.push(b'\n');
        std::fs::write(dir.join("manifest.json"), json)?;

        let mut bin = std::io::BufWriter::new(std::fs::File::create(dir.join("params.bin"))?);
        for tensor in self.params.values() {
            for v in tensor.data() {
                bin.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Loads a model saved by [`Model::save`].
    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let manifest: Manifest =
            serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
        if manifest.schema != CHECKPOINT_SCHEMA {
            return Err(ModelError::BadCheckpoint(format!(
                "schema {} unsupported (expected {CHECKPOINT_SCHEMA})",
                manifest.schema
            )));
        }
        manifest.config.validate()?;
        let expected: Vec<(String, Vec<usize>)> = param_layout(&manifest.config);
        let manifest_layout: Vec<(String, Vec<usize>)> = manifest
            .params
            .iter()
            .map(|p| (p.name.clone(), p.shape.clone()))
            .collect();
        if expected != manifest_layout {
            return Err(ModelError::BadCheckpoint(
                "parameter table does not match the config's layout".into(),
            ));
        }

        let mut bin = std::io::BufReader::new(std::fs::File::open(dir.join("params.bin"))?);
        let mut params = BTreeMap::new();
        for entry in &manifest.params {
            let n: usize = entry.shape.iter().product();
            let mut data = vec![0.0; n];
            let mut buf = [0u8; 8];
            for slot in data.iter_mut() {
                bin.read_exact(&mut buf)?;
                *slot = f64::from_le_bytes(buf);
            }
            params.insert(
                entry.name.clone(),
                Tensor::new(entry.shape.clone(), data)
                    .map_err(|e| ModelError::BadCheckpoint(e.to_string()))?,
            );
        }
        let mut trailing = [0u8; 1];
        if bin.read(&mut trailing)? != 0 {
            return Err(ModelError::BadCheckpoint(
                "params.bin longer than the manifest describes".into(),
            ));
        }
        Ok(Self {
            config: manifest.config,
            params,
        })
    }
}

const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema: u32,
    config: ModelConfig,
    params: Vec<ManifestParam>,
}

#[derive(Serialize, Deserialize)]
struct ManifestParam {
    name: String,
    shape: Vec<usize>,
}

enum InitKind {
    Zero,
    One,
    Normal,
}

fn init_kind(name: &str) -> InitKind {
    match name.rsplit('.').next().unwrap_or(name) {
        "gamma" => InitKind::One,
        "beta" | "bias" | "bq" | "bk" | "bv" | "bo" | "b1" | "b2" | "lora_b" => InitKind::Zero,
        _ => InitKind::Normal,
    }
}

/// The full `(name, shape)` table for a config, in sorted name order.
fn param_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let mut layout: Vec<(String, Vec<usize>)> = Vec::new();
    layout.push(("embeddings.token".into(), vec![config.vocab_size, d]));
    layout.push(("embeddings.position".into(), vec![config.max_seq_len, d]));
    layout.push(("final_ln.gamma".into(), vec![d]));
    layout.push(("final_ln.beta".into(), vec![d]));
    layout.push(("heads.nsp.weight".into(), vec![d, 2]));
    layout.push(("heads.nsp.bias".into(), vec![2]));
    if !config.tied_lm_head {
        layout.push(("heads.lm.weight".into(), vec![d, config.vocab_size]));
    }
    for i in 0..config.n_layers {
        let p = format!("layers.{i}");
        for proj in ["wq", "wk", "wv", "wo"] {
            layout.push((format!("{p}.attn.{proj}"), vec![d, d]));
            if let Some(a) = &config.adapters {
                layout.push((format!("{p}.attn.{proj}.lora_a"), vec![d, a.rank]));
                layout.push((format!("{p}.attn.{proj}.lora_b"), vec![a.rank, d]));
            }
        }
        for b in ["bq", "bk", "bv", "bo"] {
            layout.push((format!("{p}.attn.{b}"), vec![d]));
        }
        layout.push((format!("{p}.mlp.w1"), vec![d, config.d_ff]));
        layout.push((format!("{p}.mlp.b1"), vec![config.d_ff]));
        layout.push((format!("{p}.mlp.w2"), vec![config.d_ff, d]));
        layout.push((format!("{p}.mlp.b2"), vec![d]));
        for ln in ["ln1", "ln2"] {
            layout.push((format!("{p}.{ln}.gamma"), vec![d]));
            layout.push((format!("{p}.{ln}.beta"), vec![d]));
        }
    }
    layout.sort_by(|a, b| a.0.cmp(&b.0));
    layout
}
