//! Differentiable loss graphs for every objective.
//!
//! Losses come back as a **sum** plus a unit count. Dividing once by the
//! total unit count — rather than averaging per batch — is what lets
//! micro-batch gradient accumulation reproduce full-batch gradients exactly
//! for the decomposable objectives.

use super::{ObjectiveConfig, ObjectiveError, ObjectiveKind, PreparedBatch};
use crate::autograd::{Tensor, Value};
use crate::models::{mean_pool_weights, Binding, DropoutMode, ForwardOptions, Model};

/// A loss **sum** node and the number of units summed into it.
#[derive(Debug)]
pub struct LossParts {
    pub sum: Value,
    pub units: f64,
}

impl LossParts {
    /// The mean loss as a scalar graph node.
    pub fn mean(&self) -> Result<Value, ObjectiveError> {
        Ok(self.sum.scale(1.0 / self.units)?)
    }
}

/// A loss graph together with the final hidden state it was built on.
///
/// The `hidden` node (`[batch, seq, d_model]`, post final layer norm) is the
/// representation the loss head consumed. Callers that need the loss
/// gradient *at the representation* — rather than at the parameters — can
/// `watch()` it before running backward. For contrastive objectives, which
/// forward the batch twice, `hidden` is the first augmented view's state.
#[derive(Debug)]
pub struct TracedLoss {
    pub parts: LossParts,
    pub hidden: Value,
}

/// Builds the loss graph for a prepared batch on an existing binding.
///
/// `dropout` drives the regular model dropout sites. Contrastive objectives
/// ignore it for their two augmented passes: those always run with dropout
/// active, seeded by the batch's view seeds, because the noise *is* the
/// augmentation.
pub fn build_loss(
    model: &Model,
    binding: &Binding,
    prepared: &PreparedBatch,
    dropout: DropoutMode,
) -> Result<LossParts, ObjectiveError> {
    Ok(build_traced_loss(model, binding, prepared, dropout)?.parts)
}

/// Like [`build_loss`], but also surfaces the final hidden state feeding the
/// loss head so its gradient can be captured.
pub fn build_traced_loss(
    model: &Model,
    binding: &Binding,
    prepared: &PreparedBatch,
    dropout: DropoutMode,
) -> Result<TracedLoss, ObjectiveError> {
    match prepared.kind {
        ObjectiveKind::Mlm
        | ObjectiveKind::SpanDenoise
        | ObjectiveKind::CausalSpan
        | ObjectiveKind::CausalLm => token_loss(model, binding, prepared, dropout),
        ObjectiveKind::Nsp => pair_loss(model, binding, prepared, dropout),
        ObjectiveKind::SimCse => {
            let cfg = contrastive_config(prepared)?;
            let (za, zb, hidden) = two_views(model, binding, prepared)?;
            let parts = info_nce(&za, &zb, cfg.temperature)?;
            Ok(TracedLoss { parts, hidden })
        }
        ObjectiveKind::BarlowTwins => {
            let cfg = contrastive_config(prepared)?;
            let (za, zb, hidden) = two_views(model, binding, prepared)?;
            let parts = redundancy_reduction(&za, &zb, cfg.redundancy_weight, cfg.bn_eps)?;
            Ok(TracedLoss { parts, hidden })
        }
    }
}

/// The objective knobs a contrastive loss needs at graph-build time travel
/// with the prepared batch itself; everything else is architecture-level.
fn contrastive_config(prepared: &PreparedBatch) -> Result<ObjectiveConfig, ObjectiveError> {
    // Loss-shape hyperparameters are global experiment constants, so the
    // defaults are authoritative; a future per-run override would extend
    // `PreparedBatch`.
    let _ = prepared;
    Ok(ObjectiveConfig::default())
}

fn token_loss(
    model: &Model,
    binding: &Binding,
    prepared: &PreparedBatch,
    dropout: DropoutMode,
) -> Result<TracedLoss, ObjectiveError> {
    let batch = &prepared.input;
    let positions = batch.batch() * batch.seq();
    if prepared.targets.len() != positions || prepared.target_weights.len() != positions {
        return Err(ObjectiveError::BadRows(format!(
            "supervision length {} does not cover {} positions",
            prepared.targets.len(),
            positions
        )));
    }
    let opts = ForwardOptions {
        causal: prepared.kind.is_causal(),
        dropout,
        capture_depths: Vec::new(),
    };
    let out = model.forward(binding, batch, &opts)?;
    let logits = model.lm_logits(binding, &out.hidden)?;
    let flat = logits.reshape(&[positions, model.config().vocab_size])?;
    let sum = flat.cross_entropy_logits(&prepared.targets, &prepared.target_weights)?;
    Ok(TracedLoss {
        parts: LossParts {
            sum,
            units: prepared.units(),
        },
        hidden: out.hidden,
    })
}

fn pair_loss(
    model: &Model,
    binding: &Binding,
    prepared: &PreparedBatch,
    dropout: DropoutMode,
) -> Result<TracedLoss, ObjectiveError> {
    let batch = &prepared.input;
    if prepared.pair_labels.len() != batch.batch() {
        return Err(ObjectiveError::BadRows(format!(
            "{} labels for {} rows",
            prepared.pair_labels.len(),
            batch.batch()
        )));
    }
    let opts = ForwardOptions {
        causal: false,
        dropout,
        capture_depths: Vec::new(),
    };
    let out = model.forward(binding, batch, &opts)?;
    let logits = model.nsp_logits(binding, &out.hidden, batch)?;
    let weights = vec![1.0; prepared.pair_labels.len()];
    let sum = logits.cross_entropy_logits(&prepared.pair_labels, &weights)?;
    Ok(TracedLoss {
        parts: LossParts {
            sum,
            units: prepared.units(),
        },
        hidden: out.hidden,
    })
}

/// Runs the two augmented passes of a contrastive objective and mean-pools
/// each into `[batch, d_model]` sentence embeddings. Also returns the first
/// view's final hidden state for gradient capture.
fn two_views(
    model: &Model,
    binding: &Binding,
    prepared: &PreparedBatch,
) -> Result<(Value, Value, Value), ObjectiveError> {
    let (seed_a, seed_b) = prepared
        .view_seeds
        .ok_or_else(|| ObjectiveError::BadRows("contrastive batch without view seeds".into()))?;
    let batch = &prepared.input;
    if batch.batch() < 2 {
        return Err(ObjectiveError::ContrastiveBatchTooSmall);
    }
    let weights = mean_pool_weights(batch);
    let mut hidden_a = None;
    let mut pooled = Vec::with_capacity(2);
    for seed in [seed_a, seed_b] {
        let opts = ForwardOptions {
            causal: false,
            dropout: DropoutMode::Enabled { seed },
            capture_depths: Vec::new(),
        };
        let out = model.forward(binding, batch, &opts)?;
        pooled.push(out.hidden.masked_mean_pool(&weights)?);
        if hidden_a.is_none() {
            hidden_a = Some(out.hidden);
        }
    }
    let zb = pooled.pop().expect("two views");
    let za = pooled.pop().expect("two views");
    Ok((za, zb, hidden_a.expect("first view ran")))
}

/// One-directional InfoNCE over two `[batch, d]` embedding sets: rows are
/// L2-normalized, similarities scaled by `1/temperature`, and each row of the
/// first view must pick out its own partner in the second. The sum runs over
/// the `batch` anchor rows.
pub fn info_nce(za: &Value, zb: &Value, temperature: f64) -> Result<LossParts, ObjectiveError> {
    if temperature <= 0.0 {
        return Err(ObjectiveError::BadTemperature(temperature));
    }
    let shape = za.shape();
    if shape.len() != 2 || zb.shape() != shape {
        return Err(ObjectiveError::BadRows(format!(
            "embedding shapes {:?} and {:?} must be equal rank-2",
            shape,
            zb.shape()
        )));
    }
    let n = shape[0];
    if n < 2 {
        return Err(ObjectiveError::ContrastiveBatchTooSmall);
    }
    let na = za.l2_normalize_rows(1e-12)?;
    let nb = zb.l2_normalize_rows(1e-12)?;
    let logits = na
        .matmul(&nb.transpose(0, 1)?)?
        .scale(1.0 / temperature)?;
    let targets: Vec<usize> = (0..n).collect();
    let weights = vec![1.0; n];
    let sum = logits.cross_entropy_logits(&targets, &weights)?;
    Ok(LossParts {
        sum,
        units: n as f64,
    })
}

/// Cross-correlation identity loss between two `[batch, d]` views: columns
/// are batch-normalized, the `d × d` cross-correlation `C = ẑₐᵀẑᵦ / batch`
/// is formed, and the loss is `Σᵢ(1−Cᵢᵢ)² + λ·Σᵢ≠ⱼCᵢⱼ²` as a single sum.
pub fn redundancy_reduction(
    za: &Value,
    zb: &Value,
    lambda: f64,
    bn_eps: f64,
) -> Result<LossParts, ObjectiveError> {
    let shape = za.shape();
    if shape.len() != 2 || zb.shape() != shape {
        return Err(ObjectiveError::BadRows(format!(
            "embedding shapes {:?} and {:?} must be equal rank-2",
            shape,
            zb.shape()
        )));
    }
    let (n, d) = (shape[0], shape[1]);
    if n < 2 {
        return Err(ObjectiveError::ContrastiveBatchTooSmall);
    }
    let graph = za.graph().clone();
    let ha = za.batch_norm_cols(bn_eps)?;
    let hb = zb.batch_norm_cols(bn_eps)?;
    let cross = ha
        .transpose(0, 1)?
        .matmul(&hb)?
        .scale(1.0 / n as f64)?;
    let eye = graph.constant(Tensor::eye(d))?;
    let diff = cross.sub(&eye)?;
    let squared = diff.mul(&diff)?;
    // Diagonal entries weigh 1, off-diagonal entries weigh λ.
    let mut wdata = vec![lambda; d * d];
    for i in 0..d {
        wdata[i * d + i] = 1.0;
    }
    let weights = graph.constant(Tensor::new(vec![d, d], wdata).expect("square"))?;
    let sum = squared.mul(&weights)?.sum_all()?;
    Ok(LossParts { sum, units: 1.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::models::ModelConfig;
    use crate::objectives::prepare_batch;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn info_nce_closed_form_for_orthogonal_pairs() {
        // Two anchors aligned exactly with their partners and orthogonal to
        // the imposter: each row's loss is ln(1 + e^{(0−1)/τ}).
        let graph = Graph::new();
        let z = graph
            .leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let tau = 1.0;
        let parts = info_nce(&z, &z, tau).unwrap();
        assert_eq!(parts.units, 2.0);
        let expected = 2.0 * (1.0 + (-1.0f64 / tau).exp()).ln();
        assert!((parts.sum.item().unwrap() - expected).abs() < 1e-12);
        // Scaling the rows must not matter: the loss sees normalized copies.
        // (The normalizer's internal eps shifts small-norm rows by ~1e-11.)
        let scaled = graph
            .leaf(Tensor::new(vec![2, 2], vec![7.0, 0.0, 0.0, 0.3]).unwrap())
            .unwrap();
        let parts2 = info_nce(&scaled, &z, tau).unwrap();
        assert!((parts2.sum.item().unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn info_nce_sharpens_with_temperature() {
        let graph = Graph::new();
        let z = graph
            .leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let cold = info_nce(&z, &z, 0.05).unwrap().sum.item().unwrap();
        let warm = info_nce(&z, &z, 1.0).unwrap().sum.item().unwrap();
        assert!(cold < warm);
        assert!(cold < 1e-8); // e^{-20} is negligible
    }

    #[test]
    fn redundancy_loss_vanishes_for_decorrelated_views() {
        let graph = Graph::new();
        // Columns have zero mean, unit variance, and are orthogonal.
        let z = graph
            .leaf(
                Tensor::new(
                    vec![4, 2],
                    vec![1.0, 1.0, -1.0, 1.0, 1.0, -1.0, -1.0, -1.0],
                )
                .unwrap(),
            )
            .unwrap();
        let parts = redundancy_reduction(&z, &z, 5e-3, 1e-5).unwrap();
        assert_eq!(parts.units, 1.0);
        assert!(parts.sum.item().unwrap() < 1e-6);
    }

    #[test]
    fn redundancy_loss_charges_lambda_for_duplicated_features() {
        let graph = Graph::new();
        // Both columns identical: after normalization C = [[1,1],[1,1]], so
        // the two off-diagonal cells each cost λ·1².
        let lambda = 5e-3;
        let z = graph
            .leaf(
                Tensor::new(
                    vec![4, 2],
                    vec![1.0, 1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0],
                )
                .unwrap(),
            )
            .unwrap();
        let parts = redundancy_reduction(&z, &z, lambda, 1e-5).unwrap();
        let loss = parts.sum.item().unwrap();
        assert!((loss - 2.0 * lambda).abs() < 1e-6, "loss {loss}");
    }

    #[test]
    fn degenerate_contrastive_inputs_are_rejected() {
        let graph = Graph::new();
        let one_row = graph
            .leaf(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap())
            .unwrap();
        assert!(matches!(
            info_nce(&one_row, &one_row, 1.0).unwrap_err(),
            ObjectiveError::ContrastiveBatchTooSmall
        ));
        let z = graph
            .leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        assert!(matches!(
            info_nce(&z, &z, 0.0).unwrap_err(),
            ObjectiveError::BadTemperature(_)
        ));
        let wrong = graph
            .leaf(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap())
            .unwrap();
        assert!(matches!(
            redundancy_reduction(&z, &wrong, 5e-3, 1e-5).unwrap_err(),
            ObjectiveError::BadRows(_)
        ));
    }

    #[test]
    fn every_objective_produces_a_finite_positive_mean_loss() {
        let model_cfg = ModelConfig {
            vocab_size: 32,
            max_seq_len: 16,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            dropout: 0.1,
            ..ModelConfig::default()
        };
        let model = Model::new(model_cfg.clone(), 77).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let rows: Vec<Vec<usize>> = (0..4)
            .map(|r| (0..8).map(|t| (r * 8 + t * 3) % 28).collect())
            .collect();
        for kind in ObjectiveKind::ALL {
            let prepared = prepare_batch(
                kind,
                &rows,
                &model_cfg,
                &ObjectiveConfig::default(),
                &mut rng,
            )
            .unwrap();
            let graph = Graph::new();
            let binding = model.bind(&graph).unwrap();
            let parts = build_loss(&model, &binding, &prepared, DropoutMode::Disabled).unwrap();
            let mean = parts.mean().unwrap().item().unwrap();
            assert!(
                mean.is_finite() && mean > 0.0,
                "{}: mean loss {mean}",
                kind.name()
            );
            assert!(parts.units > 0.0);
        }
    }
}
