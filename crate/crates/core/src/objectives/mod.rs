//! Training objectives: batch construction and differentiable loss graphs.
//!
//! Every objective follows the same two-phase contract:
//!
//! 1. [`prepare_batch`] turns clean corpus rows into a [`PreparedBatch`] —
//!    corrupted/arranged input ids plus whatever supervision the objective
//!    needs (per-position targets, pair labels, or augmentation seeds). All
//!    randomness comes from the caller's RNG, so batches are replayable.
//! 2. [`build_loss`](crate::objectives::build_loss) runs the model and
//!    returns the loss as a **sum** node plus the number of units it sums
//!    over. Callers divide by units once, which makes gradient accumulation
//!    across micro-batches exact rather than approximately averaged.

mod loss;

pub use loss::{
    build_loss, build_traced_loss, info_nce, redundancy_reduction, LossParts, TracedLoss,
};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::GradError;
use crate::models::{IdBatch, ModelConfig, ModelError, SpecialTokens};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("corruption selected no positions in this batch; redraw and retry")]
    NothingSelected,

    #[error("batch rows are unsuitable: {0}")]
    BadRows(String),

    #[error("objective {objective} needs at least {need} rows, got {got}")]
    TooFewRows {
        objective: &'static str,
        need: usize,
        got: usize,
    },

    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),

    #[error("contrastive batches need at least two rows")]
    ContrastiveBatchTooSmall,

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Grad(#[from] GradError),
}

/// The objective families under study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// Masked-token reconstruction with 80/10/10 corruption.
    Mlm,
    /// Contiguous-span masking, reconstructed bidirectionally in place.
    SpanDenoise,
    /// Span corruption decoded left-to-right: next-token loss on positions
    /// whose true token fell inside a masked span.
    CausalSpan,
    /// Plain next-token prediction.
    CausalLm,
    /// Two-way sentence-pair classification over `[CLS] A [SEP] B`.
    Nsp,
    /// Dropout-augmented contrastive alignment of pooled sentence embeddings.
    SimCse,
    /// Cross-correlation identity loss between two pooled, batch-normalized
    /// views.
    BarlowTwins,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 7] = [
        ObjectiveKind::Mlm,
        ObjectiveKind::SpanDenoise,
        ObjectiveKind::CausalSpan,
        ObjectiveKind::CausalLm,
        ObjectiveKind::Nsp,
        ObjectiveKind::SimCse,
        ObjectiveKind::BarlowTwins,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Mlm => "mlm",
            ObjectiveKind::SpanDenoise => "span_denoise",
            ObjectiveKind::CausalSpan => "causal_span",
            ObjectiveKind::CausalLm => "causal_lm",
            ObjectiveKind::Nsp => "nsp",
            ObjectiveKind::SimCse => "simcse",
            ObjectiveKind::BarlowTwins => "barlow_twins",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Whether the model runs with a causal attention mask.
    pub fn is_causal(self) -> bool {
        matches!(self, ObjectiveKind::CausalLm | ObjectiveKind::CausalSpan)
    }

    /// Contrastive objectives forward the batch twice through dropout noise.
    pub fn is_contrastive(self) -> bool {
        matches!(self, ObjectiveKind::SimCse | ObjectiveKind::BarlowTwins)
    }

    /// Whether per-unit losses decompose over rows/positions, making
    /// micro-batch gradient accumulation exactly equal to full-batch
    /// gradients.
    pub fn is_decomposable(self) -> bool {
        !self.is_contrastive()
    }
}

/// Tunables shared by the objective family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    /// Fraction of positions the masking objectives corrupt.
    pub mask_rate: f64,
    /// Mean geometric span length for the span objectives.
    pub span_mean_len: f64,
    /// Hard cap on one span's length.
    pub max_span_len: usize,
    /// Softmax temperature of the contrastive alignment loss.
    pub temperature: f64,
    /// Off-diagonal weight of the redundancy-reduction loss.
    pub redundancy_weight: f64,
    /// Epsilon inside the batch-normalization denominator.
    pub bn_eps: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            mask_rate: 0.15,
            span_mean_len: 3.0,
            max_span_len: 10,
            temperature: 0.05,
            redundancy_weight: 5e-3,
            bn_eps: 1e-5,
        }
    }
}

/// A fully-specified training batch for one objective.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub kind: ObjectiveKind,
    /// The (possibly corrupted) token ids the model actually sees.
    pub input: IdBatch,
    /// Flat `[batch · seq]` reconstruction targets; meaningful only where
    /// `target_weights` is non-zero.
    pub targets: Vec<usize>,
    /// Flat `[batch · seq]` per-position loss weights (0 or 1).
    pub target_weights: Vec<f64>,
    /// Pair labels for the sentence-pair objective (0 = consecutive,
    /// 1 = random), one per row.
    pub pair_labels: Vec<usize>,
    /// Dropout seeds for the two augmented views of contrastive objectives.
    pub view_seeds: Option<(u64, u64)>,
}

impl PreparedBatch {
    /// Number of loss units this batch sums over.
    pub fn units(&self) -> f64 {
        match self.kind {
            ObjectiveKind::Nsp => self.pair_labels.len() as f64,
            ObjectiveKind::SimCse => self.input.batch() as f64,
            ObjectiveKind::BarlowTwins => 1.0,
            _ => self.target_weights.iter().sum(),
        }
    }
}

/// Builds a batch for `kind` from clean content rows.
///
/// Rows must contain only content tokens (ids below the reserved band). The
/// masking objectives may return [`ObjectiveError::NothingSelected`] when the
/// coin flips select nothing; callers should redraw with the (already
/// advanced) RNG.
pub fn prepare_batch(
    kind: ObjectiveKind,
    rows: &[Vec<usize>],
    model: &ModelConfig,
    cfg: &ObjectiveConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PreparedBatch, ObjectiveError> {
    if rows.is_empty() || rows.iter().any(Vec::is_empty) {
        return Err(ObjectiveError::BadRows("empty row or batch".into()));
    }
    let limit = SpecialTokens::content_limit(model.vocab_size);
    if let Some(&bad) = rows.iter().flatten().find(|&&id| id >= limit) {
        return Err(ObjectiveError::BadRows(format!(
            "token {bad} collides with the reserved band starting at {limit}"
        )));
    }
    match kind {
        ObjectiveKind::Mlm => prepare_mlm(rows, model, cfg, rng),
        ObjectiveKind::SpanDenoise => prepare_span(rows, model, cfg, rng, false),
        ObjectiveKind::CausalSpan => prepare_span(rows, model, cfg, rng, true),
        ObjectiveKind::CausalLm => prepare_causal_lm(rows),
        ObjectiveKind::Nsp => prepare_nsp(rows, model, rng),
        ObjectiveKind::SimCse | ObjectiveKind::BarlowTwins => {
            if rows.len() < 2 {
                return Err(ObjectiveError::ContrastiveBatchTooSmall);
            }
            Ok(PreparedBatch {
                kind,
                input: IdBatch::dense(rows)?,
                targets: Vec::new(),
                target_weights: Vec::new(),
                pair_labels: Vec::new(),
                view_seeds: Some((rng.gen(), rng.gen())),
            })
        }
    }
}

fn prepare_mlm(
    rows: &[Vec<usize>],
    model: &ModelConfig,
    cfg: &ObjectiveConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PreparedBatch, ObjectiveError> {
    let specials = SpecialTokens::for_vocab(model.vocab_size);
    let limit = SpecialTokens::content_limit(model.vocab_size);
    let mut corrupted: Vec<Vec<usize>> = rows.to_vec();
    let seq = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut targets = vec![0usize; rows.len() * seq];
    let mut weights = vec![0.0; rows.len() * seq];
    let mut any = false;
    for (r, row) in rows.iter().enumerate() {
        for (t, &original) in row.iter().enumerate() {
            if rng.gen::<f64>() >= cfg.mask_rate {
                continue;
            }
            any = true;
            targets[r * seq + t] = original;
            weights[r * seq + t] = 1.0;
            let coin = rng.gen::<f64>();
            corrupted[r][t] = if coin < 0.8 {
                specials.mask
            } else if coin < 0.9 {
                rng.gen_range(0..limit)
            } else {
                original
            };
        }
    }
    if !any {
        return Err(ObjectiveError::NothingSelected);
    }
    Ok(PreparedBatch {
        kind: ObjectiveKind::Mlm,
        input: IdBatch::padded(&corrupted, specials.pad)?,
        targets,
        target_weights: weights,
        pair_labels: Vec::new(),
        view_seeds: None,
    })
}

/// Draws a geometric span length with the configured mean, capped.
fn span_length(cfg: &ObjectiveConfig, rng: &mut ChaCha8Rng) -> usize {
    let p = 1.0 / cfg.span_mean_len;
    let u: f64 = rng.gen();
    let len = 1 + ((1.0 - u).ln() / (1.0 - p).ln()).floor() as usize;
    len.min(cfg.max_span_len)
}

/// Marks non-overlapping spans until roughly `mask_rate` of the row is
/// covered. Returns a per-position flag vector.
fn sample_span_mask(len: usize, cfg: &ObjectiveConfig, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let budget = ((len as f64 * cfg.mask_rate).round() as usize).max(1);
    let mut masked = vec![false; len];
    let mut covered = 0;
    // Bounded attempts: dense rows can run out of non-overlapping starts.
    for _ in 0..(8 * len.max(4)) {
        if covered >= budget {
            break;
        }
        let span = span_length(cfg, rng).min(len);
        let start = rng.gen_range(0..=(len - span));
        if masked[start..start + span].iter().any(|&m| m) {
            continue;
        }
        for flag in masked[start..start + span].iter_mut() {
            *flag = true;
        }
        covered += span;
    }
    masked
}

fn prepare_span(
    rows: &[Vec<usize>],
    model: &ModelConfig,
    cfg: &ObjectiveConfig,
    rng: &mut ChaCha8Rng,
    causal: bool,
) -> Result<PreparedBatch, ObjectiveError> {
    let specials = SpecialTokens::for_vocab(model.vocab_size);
    let mut corrupted: Vec<Vec<usize>> = rows.to_vec();
    let seq = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut targets = vec![0usize; rows.len() * seq];
    let mut weights = vec![0.0; rows.len() * seq];
    let mut any = false;
    for (r, row) in rows.iter().enumerate() {
        let masked = sample_span_mask(row.len(), cfg, rng);
        for (t, &in_span) in masked.iter().enumerate() {
            if in_span {
                corrupted[r][t] = specials.mask;
            }
            if causal {
                // Predicting position t supervises the *next* token, and only
                // when that token was hidden by a span.
                if t + 1 < row.len() && masked[t + 1] {
                    targets[r * seq + t] = row[t + 1];
                    weights[r * seq + t] = 1.0;
                    any = true;
                }
            } else if in_span {
                targets[r * seq + t] = row[t];
                weights[r * seq + t] = 1.0;
                any = true;
            }
        }
    }
    if !any {
        return Err(ObjectiveError::NothingSelected);
    }
    Ok(PreparedBatch {
        kind: if causal {
            ObjectiveKind::CausalSpan
        } else {
            ObjectiveKind::SpanDenoise
        },
        input: IdBatch::padded(&corrupted, specials.pad)?,
        targets,
        target_weights: weights,
        pair_labels: Vec::new(),
        view_seeds: None,
    })
}

fn prepare_causal_lm(rows: &[Vec<usize>]) -> Result<PreparedBatch, ObjectiveError> {
    let seq = rows.iter().map(Vec::len).max().unwrap_or(0);
    if rows.iter().any(|r| r.len() < 2) {
        return Err(ObjectiveError::BadRows(
            "next-token prediction needs rows of length ≥ 2".into(),
        ));
    }
    let mut targets = vec![0usize; rows.len() * seq];
    let mut weights = vec![0.0; rows.len() * seq];
    for (r, row) in rows.iter().enumerate() {
        for t in 0..row.len() - 1 {
            targets[r * seq + t] = row[t + 1];
            weights[r * seq + t] = 1.0;
        }
    }
    Ok(PreparedBatch {
        kind: ObjectiveKind::CausalLm,
        input: IdBatch::dense(rows)?,
        targets,
        target_weights: weights,
        pair_labels: Vec::new(),
        view_seeds: None,
    })
}

fn prepare_nsp(
    rows: &[Vec<usize>],
    model: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PreparedBatch, ObjectiveError> {
    if rows.len() < 2 {
        return Err(ObjectiveError::TooFewRows {
            objective: "nsp",
            need: 2,
            got: rows.len(),
        });
    }
    if rows.iter().any(|r| r.len() < 2) {
        return Err(ObjectiveError::BadRows(
            "pair construction needs rows of length ≥ 2".into(),
        ));
    }
    let specials = SpecialTokens::for_vocab(model.vocab_size);
    let mut sequences = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let half = row.len() / 2;
        let first = &row[..half];
        let consecutive = rng.gen::<f64>() < 0.5;
        let second: &[usize] = if consecutive {
            &row[half..]
        } else {
            // Second half borrowed from a different row.
            let mut other = rng.gen_range(0..rows.len() - 1);
            if other >= i {
                other += 1;
            }
            let o = &rows[other];
            &o[o.len() / 2..]
        };
        let mut seq = Vec::with_capacity(2 + first.len() + second.len());
        seq.push(specials.cls);
        seq.extend_from_slice(first);
        seq.push(specials.sep);
        let room = model.max_seq_len.saturating_sub(seq.len());
        seq.extend_from_slice(&second[..second.len().min(room)]);
        sequences.push(seq);
        labels.push(if consecutive { 0 } else { 1 });
    }
    Ok(PreparedBatch {
        kind: ObjectiveKind::Nsp,
        input: IdBatch::padded(&sequences, specials.pad)?,
        targets: Vec::new(),
        target_weights: Vec::new(),
        pair_labels: labels,
        view_seeds: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn cfg() -> ObjectiveConfig {
        ObjectiveConfig::default()
    }

    fn model_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 64,
            max_seq_len: 16,
            ..ModelConfig::default()
        }
    }

    fn content_rows(n: usize, len: usize, seed: u64) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let limit = SpecialTokens::content_limit(64);
        (0..n)
            .map(|_| (0..len).map(|_| rng.gen_range(0..limit)).collect())
            .collect()
    }

    #[test]
    fn mlm_statistics_match_the_corruption_recipe() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows = content_rows(64, 16, 1);
        let batch =
            prepare_batch(ObjectiveKind::Mlm, &rows, &model_cfg(), &cfg(), &mut rng).unwrap();
        let specials = SpecialTokens::for_vocab(64);
        let total = 64 * 16;
        let selected: Vec<usize> = (0..total)
            .filter(|&i| batch.target_weights[i] == 1.0)
            .collect();
        let frac = selected.len() as f64 / total as f64;
        assert!((0.10..0.20).contains(&frac), "selection rate {frac}");
        // Targets store the original token at every selected position.
        for &i in &selected {
            assert_eq!(batch.targets[i], rows[i / 16][i % 16]);
        }
        let masked = selected
            .iter()
            .filter(|&&i| batch.input.ids()[i] == specials.mask)
            .count() as f64;
        let unchanged = selected
            .iter()
            .filter(|&&i| batch.input.ids()[i] == rows[i / 16][i % 16])
            .count() as f64;
        let switched = selected.len() as f64 - masked - unchanged;
        assert!((masked / selected.len() as f64 - 0.8).abs() < 0.08);
        assert!((switched / selected.len() as f64 - 0.1).abs() < 0.06);
        // Unselected positions pass through untouched.
        for i in (0..total).filter(|i| !selected.contains(i)) {
            assert_eq!(batch.input.ids()[i], rows[i / 16][i % 16]);
        }
        assert_eq!(batch.units(), selected.len() as f64);
    }

    #[test]
    fn span_masks_are_contiguous_and_budgeted() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = cfg();
        let mut lengths = Vec::new();
        let mut coverage = Vec::new();
        for _ in 0..400 {
            let mask = sample_span_mask(64, &c, &mut rng);
            let covered = mask.iter().filter(|&&m| m).count();
            coverage.push(covered as f64 / 64.0);
            // Extract run lengths.
            let mut run = 0;
            for &m in &mask {
                if m {
                    run += 1;
                } else if run > 0 {
                    lengths.push(run as f64);
                    run = 0;
                }
            }
            if run > 0 {
                lengths.push(run as f64);
            }
            assert!(covered >= 1);
        }
        let mean_cov = coverage.iter().sum::<f64>() / coverage.len() as f64;
        assert!(
            (0.13..0.25).contains(&mean_cov),
            "mean coverage {mean_cov}"
        );
        // Adjacent spans can merge into longer runs, so the mean run length
        // sits at or a bit above the configured span mean.
        let mean_len = lengths.iter().sum::<f64>() / lengths.len() as f64;
        assert!(
            (c.span_mean_len * 0.7..c.span_mean_len * 1.8).contains(&mean_len),
            "mean run length {mean_len}"
        );
    }

    #[test]
    fn span_denoise_masks_in_place() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows = content_rows(8, 16, 2);
        let batch = prepare_batch(
            ObjectiveKind::SpanDenoise,
            &rows,
            &model_cfg(),
            &cfg(),
            &mut rng,
        )
        .unwrap();
        let specials = SpecialTokens::for_vocab(64);
        for r in 0..8 {
            for t in 0..16 {
                let i = r * 16 + t;
                if batch.target_weights[i] == 1.0 {
                    assert_eq!(batch.input.ids()[i], specials.mask);
                    assert_eq!(batch.targets[i], rows[r][t]);
                } else {
                    assert_eq!(batch.input.ids()[i], rows[r][t]);
                }
            }
        }
    }

    #[test]
    fn causal_span_supervises_next_token_inside_spans() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let rows = content_rows(8, 16, 3);
        let batch = prepare_batch(
            ObjectiveKind::CausalSpan,
            &rows,
            &model_cfg(),
            &cfg(),
            &mut rng,
        )
        .unwrap();
        let specials = SpecialTokens::for_vocab(64);
        let mut supervised = 0;
        for r in 0..8 {
            for t in 0..16 {
                let i = r * 16 + t;
                if batch.target_weights[i] == 1.0 {
                    supervised += 1;
                    // The supervised token is the clean next token, and the
                    // model sees MASK at that next position.
                    assert_eq!(batch.targets[i], rows[r][t + 1]);
                    assert_eq!(batch.input.ids()[i + 1], specials.mask);
                }
            }
            // The final position never carries loss (no successor).
            assert_eq!(batch.target_weights[r * 16 + 15], 0.0);
        }
        assert!(supervised > 0);
    }

    #[test]
    fn causal_lm_shifts_targets_by_one() {
        let rows = vec![vec![5usize, 6, 7, 8]];
        let batch = prepare_causal_lm(&rows).unwrap();
        assert_eq!(batch.targets[..3], [6, 7, 8]);
        assert_eq!(batch.target_weights, vec![1.0, 1.0, 1.0, 0.0]);
        assert_eq!(batch.units(), 3.0);
    }

    #[test]
    fn nsp_pairs_are_balanced_and_well_formed() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let rows = content_rows(64, 10, 4);
        let mcfg = model_cfg();
        let batch = prepare_batch(ObjectiveKind::Nsp, &rows, &mcfg, &cfg(), &mut rng).unwrap();
        let specials = SpecialTokens::for_vocab(64);
        assert_eq!(batch.pair_labels.len(), 64);
        let positives = batch.pair_labels.iter().filter(|&&l| l == 0).count();
        assert!((20..=44).contains(&positives), "positives {positives}");
        for r in 0..64 {
            assert_eq!(batch.input.id(r, 0), specials.cls);
            assert_eq!(batch.input.id(r, 6), specials.sep); // [CLS] + 5 + [SEP]
            assert!(batch.input.seq() <= mcfg.max_seq_len);
            // Consecutive pairs reproduce the row's own second half.
            if batch.pair_labels[r] == 0 {
                for (offset, &tok) in rows[r][5..].iter().enumerate() {
                    assert_eq!(batch.input.id(r, 7 + offset), tok);
                }
            }
        }
    }

    #[test]
    fn contrastive_batches_carry_two_distinct_view_seeds() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let rows = content_rows(4, 8, 5);
        let batch =
            prepare_batch(ObjectiveKind::SimCse, &rows, &model_cfg(), &cfg(), &mut rng).unwrap();
        let (a, b) = batch.view_seeds.unwrap();
        assert_ne!(a, b);
        assert_eq!(batch.units(), 4.0);
        let bt = prepare_batch(
            ObjectiveKind::BarlowTwins,
            &rows,
            &model_cfg(),
            &cfg(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(bt.units(), 1.0);
        assert!(matches!(
            prepare_batch(
                ObjectiveKind::SimCse,
                &rows[..1],
                &model_cfg(),
                &cfg(),
                &mut rng
            )
            .unwrap_err(),
            ObjectiveError::ContrastiveBatchTooSmall
        ));
    }

    #[test]
    fn reserved_band_tokens_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let rows = vec![vec![1usize, 63]]; // 63 is the mask id for vocab 64
        assert!(matches!(
            prepare_batch(ObjectiveKind::CausalLm, &rows, &model_cfg(), &cfg(), &mut rng)
                .unwrap_err(),
            ObjectiveError::BadRows(_)
        ));
    }

    #[test]
    fn zero_selection_surfaces_as_a_retryable_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rows = vec![vec![1usize]];
        let never = ObjectiveConfig {
            mask_rate: 0.0,
            ..cfg()
        };
        assert!(matches!(
            prepare_batch(ObjectiveKind::Mlm, &rows, &model_cfg(), &never, &mut rng).unwrap_err(),
            ObjectiveError::NothingSelected
        ));
    }

    #[test]
    fn kind_names_round_trip() {
        for kind in ObjectiveKind::ALL {
            assert_eq!(ObjectiveKind::parse(kind.name()), Some(kind));
        }
        assert_eq!(ObjectiveKind::parse("nope"), None);
    }
}
