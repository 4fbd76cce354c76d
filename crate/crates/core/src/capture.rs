//! Probe-activation capture and before/after depth profiles.
//!
//! A *probe set* is a fixed list of token sequences. Running it through a
//! model with dropout disabled and reading hidden states at chosen relative
//! depths yields one activation matrix per depth (one pooled row per probe).
//! Comparing the matrices of two parameter states of the same architecture —
//! typically a model before and after fine-tuning — with each drift metric
//! produces the depth profiles everything downstream is built on.

use thiserror::Error;

use crate::metrics::{self, DepthProfile, Mat, MetricError, MetricKind};
use crate::models::{DropoutMode, ForwardOptions, IdBatch, Model, ModelError};

/// Probe rows are processed in slices of this many rows per forward pass to
/// bound tape memory; pooling is per row, so slicing never changes results.
const CHUNK_ROWS: usize = 32;

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("a probe set needs at least one sequence")]
    EmptyProbes,

    #[error("capture depths must be finite, strictly increasing, and in (0, 1]; got {0:?}")]
    BadDepths(Vec<f64>),

    #[error("the two models have different configurations")]
    ConfigMismatch,

    #[error(
        "activation sets cover different depths or shapes and cannot form a profile"
    )]
    DepthsMismatch,

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Metric(#[from] MetricError),
}

fn check_depths(depths: &[f64]) -> Result<(), CaptureError> {
    let ok = !depths.is_empty()
        && depths
            .iter()
            .all(|d| d.is_finite() && *d > 0.0 && *d <= 1.0)
        && depths.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(CaptureError::BadDepths(depths.to_vec()))
    }
}

/// Runs `probes` through `model` with dropout disabled and returns one
/// activation matrix per requested depth: row `i` is probe `i`'s hidden
/// state mean-pooled over its real (non-padding) positions.
///
/// `causal` selects the attention mask the model family was trained with.
/// Depths must be strictly increasing in `(0, 1]`; a depth of exactly 1
/// reads the final-norm output.
pub fn capture_activations(
    model: &Model,
    probes: &[Vec<usize>],
    depths: &[f64],
    causal: bool,
) -> Result<Vec<(f64, Mat)>, CaptureError> {
    if probes.is_empty() || probes.iter().any(Vec::is_empty) {
        return Err(CaptureError::EmptyProbes);
    }
    check_depths(depths)?;
    let d_model = model.config().d_model;
    let pad = model.specials().pad;
    let mut pooled: Vec<Vec<f64>> = vec![Vec::with_capacity(probes.len() * d_model); depths.len()];

    for chunk in probes.chunks(CHUNK_ROWS) {
        let graph = crate::autograd::Graph::new();
        // Capture never differentiates, so bind without gradient tracking.
        let binding = model.bind_where(&graph, |_| false)?;
        let batch = IdBatch::padded(chunk, pad)?;
        let opts = ForwardOptions {
            causal,
            dropout: DropoutMode::Disabled,
            capture_depths: depths.to_vec(),
        };
        let out = model.forward(&binding, &batch, &opts)?;
        debug_assert_eq!(out.captures.len(), depths.len());
        let (b, t) = (batch.batch(), batch.seq());
        for (slot, cap) in pooled.iter_mut().zip(&out.captures) {
            let data = cap.value.tensor().into_data();
            for r in 0..b {
                let mut mean = vec![0.0; d_model];
                let mut count = 0.0;
                for pos in 0..t {
                    if !batch.is_real(r, pos) {
                        continue;
                    }
                    count += 1.0;
                    let base = (r * t + pos) * d_model;
                    for (m, &v) in mean.iter_mut().zip(&data[base..base + d_model]) {
                        *m += v;
                    }
                }
                slot.extend(mean.iter().map(|v| v / count));
            }
        }
    }

    depths
        .iter()
        .zip(pooled)
        .map(|(&depth, slot)| Ok((depth, Mat::new(probes.len(), d_model, slot)?)))
        .collect()
}

/// Turns two same-depth activation sets into one [`DepthProfile`] per drift
/// metric (Procrustes, CKA, RSA), in [`MetricKind::ALL`] order.
pub fn profiles_from_activations(
    before: &[(f64, Mat)],
    after: &[(f64, Mat)],
) -> Result<Vec<DepthProfile>, CaptureError> {
    let aligned = before.len() == after.len()
        && before.iter().zip(after).all(|((da, ma), (db, mb))| {
            da == db && ma.rows() == mb.rows() && ma.cols() == mb.cols()
        });
    if !aligned || before.is_empty() {
        return Err(CaptureError::DepthsMismatch);
    }
    MetricKind::ALL
        .iter()
        .map(|&metric| {
            let points = before
                .iter()
                .zip(after)
                .map(|((depth, x), (_, y))| {
                    let delta = match metric {
                        MetricKind::Procrustes => metrics::procrustes_distance(x, y)?,
                        MetricKind::Cka => metrics::cka_distance(x, y)?,
                        MetricKind::Rsa => metrics::rsa_distance(x, y)?,
                    };
                    Ok((*depth, delta))
                })
                .collect::<Result<Vec<_>, MetricError>>()?;
            Ok(DepthProfile { metric, points })
        })
        .collect()
}

/// Captures both parameter states on the same probes and depths and returns
/// the drift profiles of `after` relative to `before`, one per metric.
///
/// Both models must share one configuration — the comparison is between
/// parameter states of a single architecture.
pub fn profile_between(
    before: &Model,
    after: &Model,
    probes: &[Vec<usize>],
    depths: &[f64],
    causal: bool,
) -> Result<Vec<DepthProfile>, CaptureError> {
    if before.config() != after.config() {
        return Err(CaptureError::ConfigMismatch);
    }
    let a = capture_activations(before, probes, depths, causal)?;
    let b = capture_activations(after, probes, depths, causal)?;
    profiles_from_activations(&a, &b)
}
