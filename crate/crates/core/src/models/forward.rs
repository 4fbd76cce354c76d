//! The transformer forward pass: embeddings, pre-norm blocks with multi-head
//! attention (optionally low-rank-adapted), output heads, and depth captures.

use super::{depth_to_layer_index, Binding, BlockKind, Model, ModelError, LAYER_NORM_EPS};
use crate::autograd::{Tensor, Value};

/// Additive mask value for disallowed attention edges. Finite on purpose:
/// after the stable softmax subtracts the row max, `exp` underflows to an
/// exact `0.0`, so masked keys contribute nothing — bit for bit — while the
/// tape stays free of infinities.
const MASK_OFF: f64 = -1e30;

/// A rectangular batch of token ids with a per-position validity mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdBatch {
    batch: usize,
    seq: usize,
    ids: Vec<usize>,
    /// 1 where the position holds a real token, 0 where it is padding.
    real: Vec<u8>,
}

impl IdBatch {
    /// A batch where every position is real; rows must share one length.
    pub fn dense(rows: &[Vec<usize>]) -> Result<Self, ModelError> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let seq = rows[0].len();
        if rows.iter().any(|r| r.len() != seq) {
            return Err(ModelError::RaggedBatch);
        }
        Ok(Self {
            batch: rows.len(),
            seq,
            ids: rows.concat(),
            real: vec![1; rows.len() * seq],
        })
    }

    /// Right-pads every row with `pad_id` up to the longest row.
    pub fn padded(rows: &[Vec<usize>], pad_id: usize) -> Result<Self, ModelError> {
        if rows.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let seq = rows.iter().map(Vec::len).max().unwrap_or(0);
        if seq == 0 {
            return Err(ModelError::EmptyBatch);
        }
        let mut ids = Vec::with_capacity(rows.len() * seq);
        let mut real = Vec::with_capacity(rows.len() * seq);
        for row in rows {
            ids.extend_from_slice(row);
            real.extend(std::iter::repeat(1).take(row.len()));
            ids.extend(std::iter::repeat(pad_id).take(seq - row.len()));
            real.extend(std::iter::repeat(0).take(seq - row.len()));
        }
        Ok(Self {
            batch: rows.len(),
            seq,
            ids,
            real,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn id(&self, row: usize, pos: usize) -> usize {
        self.ids[row * self.seq + pos]
    }

    pub fn is_real(&self, row: usize, pos: usize) -> bool {
        self.real[row * self.seq + pos] == 1
    }

    /// Count of real positions in one row.
    pub fn row_len(&self, row: usize) -> usize {
        (0..self.seq).filter(|&t| self.is_real(row, t)).count()
    }

    fn has_padding(&self) -> bool {
        self.real.iter().any(|&r| r == 0)
    }
}

/// Whether stochastic regularization is active for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    Disabled,
    /// Masks are drawn deterministically from this seed; rebuilding with the
    /// same seed reproduces the pass bit for bit.
    Enabled { seed: u64 },
}

#[derive(Debug, Clone)]
pub struct ForwardOptions {
    /// Restrict attention to past-and-present positions.
    pub causal: bool,
    pub dropout: DropoutMode,
    /// Relative depths in `(0, 1]` at which to expose hidden states.
    pub capture_depths: Vec<f64>,
}

impl ForwardOptions {
    pub fn inference(causal: bool) -> Self {
        Self {
            causal,
            dropout: DropoutMode::Disabled,
            capture_depths: Vec::new(),
        }
    }

    pub fn training(causal: bool, seed: u64) -> Self {
        Self {
            causal,
            dropout: DropoutMode::Enabled { seed },
            capture_depths: Vec::new(),
        }
    }
}

/// One captured hidden state, taken after block `layer` (one-based); a depth
/// of exactly 1 captures the final-norm output instead of the raw residual.
#[derive(Debug, Clone)]
pub struct DepthCapture {
    pub depth: f64,
    pub layer: usize,
    pub value: Value,
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// Final-norm hidden states, `[batch, seq, d_model]`.
    pub hidden: Value,
    pub captures: Vec<DepthCapture>,
}

/// Hands out distinct, reproducible seeds for each stochastic site.
struct SeedSequence {
    base: u64,
    site: u64,
}

impl SeedSequence {
    fn new(base: u64) -> Self {
        Self { base, site: 0 }
    }

    fn next(&mut self) -> u64 {
        self.site += 1;
        self.base
            .wrapping_add(self.site.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }
}

impl Model {
    /// Runs the transformer over a batch on the binding's tape.
    pub fn forward(
        &self,
        binding: &Binding,
        batch: &IdBatch,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput, ModelError> {
        let cfg = self.config();
        let (b, t, d) = (batch.batch(), batch.seq(), cfg.d_model);
        if t > cfg.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                got: t,
                max: cfg.max_seq_len,
            });
        }
        if let Some(&bad) = batch.ids().iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                token: bad,
                vocab: cfg.vocab_size,
            });
        }
        for &depth in &opts.capture_depths {
            if !(depth > 0.0 && depth <= 1.0) {
                return Err(ModelError::BadDepth(depth));
            }
        }
        let mut seeds = SeedSequence::new(match opts.dropout {
            DropoutMode::Enabled { seed } => seed,
            DropoutMode::Disabled => 0,
        });
        let p = match opts.dropout {
            DropoutMode::Enabled { .. } => cfg.dropout,
            DropoutMode::Disabled => 0.0,
        };
        let graph = binding.graph();

        // Embeddings: token rows + learned absolute positions.
        let tok = binding
            .value("embeddings.token")?
            .embedding(batch.ids(), &[b, t])?;
        let pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let pos = binding
            .value("embeddings.position")?
            .embedding(&pos_ids, &[b, t])?;
        let mut x = tok.add(&pos)?.dropout(p, seeds.next())?;

        // One shared additive attention mask for all layers, if any edge is
        // disallowed.
        let mask = self.attention_mask(batch, opts.causal)?;
        let mask = match mask {
            Some(tensor) => Some(graph.constant(tensor)?),
            None => None,
        };

        // Which block indices need a raw capture (depth < 1).
        let mut captures = Vec::new();
        for layer in 1..=cfg.n_layers {
            x = self.block(binding, layer - 1, &x, b, t, mask.as_ref(), p, &mut seeds)?;
            for &depth in &opts.capture_depths {
                if at_final_norm(depth) {
                    continue;
                }
                if depth_to_layer_index(depth, cfg.n_layers) == layer {
                    captures.push(DepthCapture {
                        depth,
                        layer,
                        value: x.clone(),
                    });
                }
            }
        }

        let hidden = x.layer_norm(
            binding.value("final_ln.gamma")?,
            binding.value("final_ln.beta")?,
            LAYER_NORM_EPS,
        )?;
        for &depth in &opts.capture_depths {
            if at_final_norm(depth) {
                captures.push(DepthCapture {
                    depth,
                    layer: cfg.n_layers,
                    value: hidden.clone(),
                });
            }
        }
        captures.sort_by(|a, b| a.depth.partial_cmp(&b.depth).expect("depths are finite"));
        let _ = d;
        Ok(ForwardOutput { hidden, captures })
    }

    /// Next-token / masked-token logits `[batch, seq, vocab]`. With a tied
    /// head these are `h · Eᵀ`; untied models use their own output matrix.
    pub fn lm_logits(&self, binding: &Binding, hidden: &Value) -> Result<Value, ModelError> {
        let weight = if self.config().tied_lm_head {
            binding.value("embeddings.token")?.transpose(0, 1)?
        } else {
            binding.value("heads.lm.weight")?.clone()
        };
        Ok(hidden.matmul(&weight)?)
    }

    /// Two-way sentence-pair logits `[batch, 2]` from the first position's
    /// hidden state.
    pub fn nsp_logits(
        &self,
        binding: &Binding,
        hidden: &Value,
        batch: &IdBatch,
    ) -> Result<Value, ModelError> {
        let pooled = hidden.masked_mean_pool(&cls_pool_weights(batch))?;
        let logits = pooled
            .matmul(binding.value("heads.nsp.weight")?)?
            .add_bias(binding.value("heads.nsp.bias")?)?;
        Ok(logits)
    }

    /// The additive `[batch · heads, seq, seq]` mask, or `None` when every
    /// edge is allowed.
    fn attention_mask(
        &self,
        batch: &IdBatch,
        causal: bool,
    ) -> Result<Option<Tensor>, ModelError> {
        if !causal && !batch.has_padding() {
            return Ok(None);
        }
        let cfg = self.config();
        let (b, t, h) = (batch.batch(), batch.seq(), cfg.n_heads);
        let mut data = vec![0.0; b * h * t * t];
        for row in 0..b {
            for i in 0..t {
                for j in 0..t {
                    let allowed = (!causal || j <= i) && batch.is_real(row, j);
                    if !allowed {
                        for head in 0..h {
                            data[((row * h + head) * t + i) * t + j] = MASK_OFF;
                        }
                    }
                }
            }
        }
        Ok(Some(
            Tensor::new(vec![b * h, t, t], data).expect("mask shape is consistent"),
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        binding: &Binding,
        layer: usize,
        x: &Value,
        b: usize,
        t: usize,
        mask: Option<&Value>,
        p: f64,
        seeds: &mut SeedSequence,
    ) -> Result<Value, ModelError> {
        let prefix = format!("layers.{layer}");
        let ln = |which: &str, input: &Value| -> Result<Value, ModelError> {
            Ok(input.layer_norm(
                binding.value(&format!("{prefix}.{which}.gamma"))?,
                binding.value(&format!("{prefix}.{which}.beta"))?,
                LAYER_NORM_EPS,
            )?)
        };
        match self.config().block {
            BlockKind::Sequential => {
                let attn = self.attention(binding, &prefix, &ln("ln1", x)?, b, t, mask, p, seeds)?;
                let x = x.add(&attn.dropout(p, seeds.next())?)?;
                let mlp = self.mlp(binding, &prefix, &ln("ln2", &x)?)?;
                Ok(x.add(&mlp.dropout(p, seeds.next())?)?)
            }
            BlockKind::Parallel => {
                let attn = self.attention(binding, &prefix, &ln("ln1", x)?, b, t, mask, p, seeds)?;
                let attn = attn.dropout(p, seeds.next())?;
                let mlp = self.mlp(binding, &prefix, &ln("ln2", x)?)?;
                let mlp = mlp.dropout(p, seeds.next())?;
                Ok(x.add(&attn)?.add(&mlp)?)
            }
        }
    }

    /// A linear projection, plus the low-rank adapter path when configured:
    /// `x·W + b + (α/r) · drop(x)·A·B`.
    fn projection(
        &self,
        binding: &Binding,
        prefix: &str,
        name: &str,
        bias: &str,
        x: &Value,
        seeds: &mut SeedSequence,
    ) -> Result<Value, ModelError> {
        let base = x
            .matmul(binding.value(&format!("{prefix}.attn.{name}"))?)?
            .add_bias(binding.value(&format!("{prefix}.attn.{bias}"))?)?;
        let Some(adapter) = &self.config().adapters else {
            return Ok(base);
        };
        let a = binding.value(&format!("{prefix}.attn.{name}.lora_a"))?;
        let b_mat = binding.value(&format!("{prefix}.attn.{name}.lora_b"))?;
        let low = x
            .dropout(adapter.dropout, seeds.next())?
            .matmul(a)?
            .matmul(b_mat)?
            .scale(adapter.alpha / adapter.rank as f64)?;
        Ok(base.add(&low)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        binding: &Binding,
        prefix: &str,
        x: &Value,
        b: usize,
        t: usize,
        mask: Option<&Value>,
        p: f64,
        seeds: &mut SeedSequence,
    ) -> Result<Value, ModelError> {
        let cfg = self.config();
        let (h, dk, d) = (cfg.n_heads, cfg.head_dim(), cfg.d_model);
        let split = |v: &Value| -> Result<Value, ModelError> {
            Ok(v.reshape(&[b, t, h, dk])?
                .transpose(1, 2)?
                .reshape(&[b * h, t, dk])?)
        };
        let q = split(&self.projection(binding, prefix, "wq", "bq", x, seeds)?)?;
        let k = split(&self.projection(binding, prefix, "wk", "bk", x, seeds)?)?;
        let v = split(&self.projection(binding, prefix, "wv", "bv", x, seeds)?)?;

        let mut scores = q
            .matmul(&k.transpose(1, 2)?)?
            .scale(1.0 / (dk as f64).sqrt())?;
        if let Some(m) = mask {
            scores = scores.add(m)?;
        }
        let probs = scores.softmax()?.dropout(p, seeds.next())?;
        let ctx = probs
            .matmul(&v)?
            .reshape(&[b, h, t, dk])?
            .transpose(1, 2)?
            .reshape(&[b, t, d])?;
        self.projection(binding, prefix, "wo", "bo", &ctx, seeds)
    }

    fn mlp(&self, binding: &Binding, prefix: &str, x: &Value) -> Result<Value, ModelError> {
        let up = x
            .matmul(binding.value(&format!("{prefix}.mlp.w1"))?)?
            .add_bias(binding.value(&format!("{prefix}.mlp.b1"))?)?
            .gelu()?;
        let down = up
            .matmul(binding.value(&format!("{prefix}.mlp.w2"))?)?
            .add_bias(binding.value(&format!("{prefix}.mlp.b2"))?)?;
        Ok(down)
    }
}

fn at_final_norm(depth: f64) -> bool {
    (depth - 1.0).abs() < 1e-9
}

/// Pooling weights selecting each row's first position.
pub fn cls_pool_weights(batch: &IdBatch) -> Vec<f64> {
    let mut w = vec![0.0; batch.batch() * batch.seq()];
    for row in 0..batch.batch() {
        w[row * batch.seq()] = 1.0;
    }
    w
}

/// Pooling weights averaging each row's real positions.
pub fn mean_pool_weights(batch: &IdBatch) -> Vec<f64> {
    (0..batch.batch())
        .flat_map(|row| {
            (0..batch.seq()).map(move |t| if batch.is_real(row, t) { 1.0 } else { 0.0 })
        })
        .collect()
}

/// Pooling weights selecting each row's last real position.
pub fn last_token_pool_weights(batch: &IdBatch) -> Vec<f64> {
    let mut w = vec![0.0; batch.batch() * batch.seq()];
    for row in 0..batch.batch() {
        let last = (0..batch.seq())
            .rev()
            .find(|&t| batch.is_real(row, t))
            .unwrap_or(0);
        w[row * batch.seq() + last] = 1.0;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::models::ModelConfig;

    fn tiny_model(dropout: f64) -> Model {
        Model::new(
            ModelConfig {
                vocab_size: 16,
                max_seq_len: 8,
                d_model: 8,
                n_layers: 2,
                n_heads: 2,
                d_ff: 16,
                dropout,
                ..ModelConfig::default()
            },
            11,
        )
        .unwrap()
    }

    fn run(
        model: &Model,
        rows: &[Vec<usize>],
        opts: &ForwardOptions,
    ) -> (ForwardOutput, IdBatch, Binding) {
        let graph = Graph::new();
        let binding = model.bind(&graph).unwrap();
        let batch = IdBatch::dense(rows).unwrap();
        let out = model.forward(&binding, &batch, opts).unwrap();
        (out, batch, binding)
    }

    #[test]
    fn forward_shapes_are_consistent() {
        let model = tiny_model(0.0);
        let (out, batch, binding) = run(
            &model,
            &[vec![1, 2, 3, 4], vec![5, 6, 7, 8]],
            &ForwardOptions::inference(false),
        );
        assert_eq!(out.hidden.shape(), vec![2, 4, 8]);
        let logits = model.lm_logits(&binding, &out.hidden).unwrap();
        assert_eq!(logits.shape(), vec![2, 4, 16]);
        let nsp = model.nsp_logits(&binding, &out.hidden, &batch).unwrap();
        assert_eq!(nsp.shape(), vec![2, 2]);
    }

    #[test]
    fn captures_cover_requested_depths() {
        let model = tiny_model(0.0);
        let opts = ForwardOptions {
            causal: false,
            dropout: DropoutMode::Disabled,
            capture_depths: vec![0.5, 1.0],
        };
        let (out, _, _) = run(&model, &[vec![1, 2, 3]], &opts);
        assert_eq!(out.captures.len(), 2);
        assert_eq!(out.captures[0].layer, 1); // round(0.5·2) = 1
        assert_eq!(out.captures[1].layer, 2);
        // Depth 1 exposes the final-norm output itself.
        let final_capture = out.captures[1].value.tensor();
        let hidden = out.hidden.tensor();
        assert_eq!(final_capture.data(), hidden.data());
        // Depth 0.5 exposes a raw residual, which differs from the final norm.
        assert_ne!(out.captures[0].value.tensor().data(), hidden.data());
    }

    #[test]
    fn same_dropout_seed_reproduces_bitwise() {
        let model = tiny_model(0.3);
        let opts = ForwardOptions::training(true, 99);
        let (a, _, _) = run(&model, &[vec![1, 2, 3, 4]], &opts);
        let (b, _, _) = run(&model, &[vec![1, 2, 3, 4]], &opts);
        let bits = |v: &Value| -> Vec<u64> { v.tensor().data().iter().map(|x| x.to_bits()).collect() };
        assert_eq!(bits(&a.hidden), bits(&b.hidden));
        let (c, _, _) = run(&model, &[vec![1, 2, 3, 4]], &ForwardOptions::training(true, 100));
        assert_ne!(bits(&a.hidden), bits(&c.hidden));
    }

    #[test]
    fn padded_rows_do_not_change_real_prefix_under_causal_mask() {
        let model = tiny_model(0.0);
        let graph = Graph::new();
        let binding = model.bind(&graph).unwrap();
        let pad = model.specials().pad;
        let short = IdBatch::padded(&[vec![3, 1, 4]], pad).unwrap();
        assert_eq!(short.seq(), 3);
        let padded = IdBatch::padded(&[vec![3, 1, 4], vec![2; 6]], pad).unwrap();
        assert_eq!(padded.seq(), 6);
        assert!(padded.is_real(0, 2));
        assert!(!padded.is_real(0, 3));
        assert_eq!(padded.id(0, 4), pad);
        assert_eq!(padded.row_len(0), 3);
        assert_eq!(padded.row_len(1), 6);
        let opts = ForwardOptions::inference(true);
        let a = model.forward(&binding, &short, &opts).unwrap();
        let b = model.forward(&binding, &padded, &opts).unwrap();
        // First row, first three positions agree bitwise despite the padding.
        let (da, db) = (a.hidden.tensor(), b.hidden.tensor());
        let d = model.config().d_model;
        for t in 0..3 {
            for j in 0..d {
                let va = da.data()[t * d + j];
                let vb = db.data()[t * d + j];
                assert_eq!(va.to_bits(), vb.to_bits(), "mismatch at ({t}, {j})");
            }
        }
    }

    #[test]
    fn pooling_weight_builders() {
        let pad = 99;
        let batch = IdBatch::padded(&[vec![7, 8], vec![1, 2, 3, 4]], pad).unwrap();
        assert_eq!(
            cls_pool_weights(&batch),
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(
            mean_pool_weights(&batch),
            vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]
        );
        assert_eq!(
            last_token_pool_weights(&batch),
            vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn rejects_overlong_and_out_of_range_input() {
        let model = tiny_model(0.0);
        let graph = Graph::new();
        let binding = model.bind(&graph).unwrap();
        let long = IdBatch::dense(&[(0..9).collect::<Vec<usize>>()]).unwrap();
        assert!(matches!(
            model
                .forward(&binding, &long, &ForwardOptions::inference(false))
                .unwrap_err(),
            ModelError::SequenceTooLong { got: 9, max: 8 }
        ));
        let bad = IdBatch::dense(&[vec![1, 99]]).unwrap();
        assert!(matches!(
            model
                .forward(&binding, &bad, &ForwardOptions::inference(false))
                .unwrap_err(),
            ModelError::TokenOutOfRange { token: 99, .. }
        ));
        let opts = ForwardOptions {
            causal: false,
            dropout: DropoutMode::Disabled,
            capture_depths: vec![0.0],
        };
        let ok = IdBatch::dense(&[vec![1, 2]]).unwrap();
        assert!(matches!(
            model.forward(&binding, &ok, &opts).unwrap_err(),
            ModelError::BadDepth(_)
        ));
    }

    #[test]
    fn adapters_are_inert_at_initialization() {
        let base_cfg = ModelConfig {
            vocab_size: 16,
            max_seq_len: 8,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        let plain = Model::new(base_cfg.clone(), 7).unwrap();
        let adapted = {
            let cfg = ModelConfig {
                adapters: Some(crate::models::AdapterConfig {
                    rank: 2,
                    alpha: 4.0,
                    dropout: 0.0,
                }),
                ..base_cfg
            };
            let mut m = Model::new(cfg, 123).unwrap();
            // Align the shared weights with the plain model; adapter factors
            // keep their own init (second factor zero ⇒ inert).
            for name in plain.param_names() {
                let t = plain.param(name).unwrap().clone();
                m.set_param(name, t).unwrap();
            }
            m
        };
        let rows = vec![vec![1usize, 2, 3, 4, 5]];
        let opts = ForwardOptions::inference(true);
        let (a, _, _) = run(&plain, &rows, &opts);
        let (b, _, _) = run(&adapted, &rows, &opts);
        let (da, db) = (a.hidden.tensor(), b.hidden.tensor());
        for (x, y) in da.data().iter().zip(db.data()) {
            assert_eq!(x, y, "adapter at init must not perturb the forward pass");
        }
    }

    #[test]
    fn parallel_blocks_read_one_input() {
        // With zeroed attention output projection, a parallel block reduces to
        // x + mlp(ln2 x); a sequential block would instead feed the attention
        // residual into ln2. Verify they differ on the same weights.
        let mut cfg = ModelConfig {
            vocab_size: 16,
            max_seq_len: 8,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        let seq_model = Model::new(cfg.clone(), 21).unwrap();
        cfg.block = BlockKind::Parallel;
        let mut par_model = Model::new(cfg, 22).unwrap();
        for name in seq_model.param_names() {
            par_model
                .set_param(name, seq_model.param(name).unwrap().clone())
                .unwrap();
        }
        let rows = vec![vec![3usize, 1, 4, 1, 5]];
        let opts = ForwardOptions::inference(false);
        let (a, _, _) = run(&seq_model, &rows, &opts);
        let (b, _, _) = run(&par_model, &rows, &opts);
        assert_ne!(a.hidden.tensor().data(), b.hidden.tensor().data());
    }
}
