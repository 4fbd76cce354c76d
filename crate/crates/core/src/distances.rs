//! Training-free distances between training objectives.
//!
//! Every objective pushes a gradient into the model's final hidden
//! representation; two objectives that push in similar directions will
//! reshape the network in similar ways once training starts. This module
//! measures that similarity on a fixed model without taking an optimizer
//! step: it captures the loss gradient at the final hidden state over a
//! fixed schedule of input batches, mean-pools it over each sample's
//! non-padding positions, and compares the stacked per-sample gradient
//! matrices across objectives with alignment-invariant (Procrustes) and
//! direction (cosine / Pearson of mean-gradient) distances, plus
//! dimensionality-robustness checks via random projection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::autograd::{Graph, GradError};
use crate::metrics::{dump_matrix, load_matrix, procrustes_distance, Mat, MetricError};
use crate::models::{DropoutMode, Model, ModelError};
use crate::objectives::{
    build_traced_loss, prepare_batch, ObjectiveConfig, ObjectiveError, ObjectiveKind,
};
use crate::stats::{pearson, spearman, StatsError};

/// Entries at or below this magnitude count as zero for the sparsity stat,
/// and mean-gradient norms at or below it make a cosine direction undefined.
pub const NONZERO_THRESHOLD: f64 = 1e-12;

/// How many times one schedule batch may be re-drawn when an objective's
/// random corruption happens to select nothing.
const PREP_RETRIES: usize = 16;

#[derive(Debug, Error)]
pub enum DistanceError {
    #[error("schedule has no batches or an empty batch")]
    EmptySchedule,

    #[error("gradient matrices have shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("gradient matrices come from different batch schedules")]
    ScheduleMismatch,

    #[error("batch row counts sum to {rows_listed}, but the matrix has {rows_held} rows")]
    BatchRowsMismatch { rows_listed: usize, rows_held: usize },

    #[error("objective {0} has a near-zero mean gradient; its direction is undefined")]
    IncoherentMean(&'static str),

    #[error("projection width {dim} must be non-zero and below the gradient dimension {cols}")]
    BadProjectionDim { dim: usize, cols: usize },

    #[error("need at least {need} {what}, got {got}")]
    TooFew {
        what: &'static str,
        need: usize,
        got: usize,
    },

    #[error("batch index {index} is out of range for {batches} batches")]
    BatchOutOfRange { index: usize, batches: usize },

    #[error("schedule batch {batch} selected nothing after {attempts} redraws")]
    UnluckyBatch { batch: usize, attempts: usize },

    #[error("gradient dump is missing tag {0}")]
    MissingTag(&'static str),

    #[error(transparent)]
    Metric(#[from] MetricError),

    #[error(transparent)]
    Objective(#[from] ObjectiveError),

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Grad(#[from] GradError),

    #[error(transparent)]
    Stats(#[from] StatsError),
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv_bytes(mut acc: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        acc = (acc ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3);
    }
    acc
}

/// A fixed sequence of clean input batches shared by every objective.
///
/// Holding the content *and order* fixed is what makes gradient rows
/// comparable across objectives: row `i` of every collected matrix reflects
/// the same input in the same batch context. The schedule also carries a
/// base seed from which each `(batch, objective)` pair derives its own
/// corruption stream, so collection is deterministic end to end.
#[derive(Debug, Clone)]
pub struct Schedule {
    batches: Vec<Vec<Vec<usize>>>,
    seed: u64,
    id: u64,
}

impl Schedule {
    pub fn new(batches: Vec<Vec<Vec<usize>>>, seed: u64) -> Result<Self, DistanceError> {
        if batches.is_empty() || batches.iter().any(Vec::is_empty) {
            return Err(DistanceError::EmptySchedule);
        }
        let mut id = fnv_bytes(0xCBF2_9CE4_8422_2325, &seed.to_le_bytes());
        id = fnv_bytes(id, &(batches.len() as u64).to_le_bytes());
        for batch in &batches {
            id = fnv_bytes(id, &(batch.len() as u64).to_le_bytes());
            for row in batch {
                id = fnv_bytes(id, &(row.len() as u64).to_le_bytes());
                for &tok in row {
                    id = fnv_bytes(id, &(tok as u64).to_le_bytes());
                }
            }
        }
        Ok(Self { batches, seed, id })
    }

    /// Samples a schedule of uniform random content tokens in
    /// `0..content_tokens`.
    pub fn sample(
        n_batches: usize,
        rows_per_batch: usize,
        row_len: usize,
        content_tokens: usize,
        seed: u64,
    ) -> Result<Self, DistanceError> {
        if n_batches == 0 || rows_per_batch == 0 || row_len == 0 || content_tokens == 0 {
            return Err(DistanceError::EmptySchedule);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed));
        let dist = Uniform::new(0, content_tokens);
        let batches = (0..n_batches)
            .map(|_| {
                (0..rows_per_batch)
                    .map(|_| (0..row_len).map(|_| dist.sample(&mut rng)).collect())
                    .collect()
            })
            .collect();
        Self::new(batches, seed)
    }

    pub fn batches(&self) -> &[Vec<Vec<usize>>] {
        &self.batches
    }

    /// Content hash identifying this schedule (seed, shapes, and tokens).
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn total_rows(&self) -> usize {
        self.batches.iter().map(Vec::len).sum()
    }

    /// The corruption seed for one `(batch, objective)` cell, derived from
    /// the schedule seed and the batch's *content*: re-collection is
    /// reproducible, distinct batches draw independent corruption, and
    /// duplicated batches corrupt identically — so equal-content halves of
    /// a schedule yield equal gradient rows.
    fn prep_seed(&self, batch: usize, objective: ObjectiveKind) -> u64 {
        let mut h = fnv_bytes(0xCBF2_9CE4_8422_2325, &self.seed.to_le_bytes());
        for row in &self.batches[batch] {
            h = fnv_bytes(h, &(row.len() as u64).to_le_bytes());
            for &tok in row {
                h = fnv_bytes(h, &(tok as u64).to_le_bytes());
            }
        }
        splitmix(h ^ ((objective as u64) << 32))
    }
}

/// Pooled per-sample final-representation gradients for one objective:
/// one row per schedule input, one column per hidden dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMatrix {
    objective: ObjectiveKind,
    schedule_id: u64,
    batch_rows: Vec<usize>,
    mat: Mat,
}

impl GradientMatrix {
    /// Assembles a matrix from externally produced parts (loads, tests).
    pub fn from_parts(
        objective: ObjectiveKind,
        schedule_id: u64,
        batch_rows: Vec<usize>,
        mat: Mat,
    ) -> Result<Self, DistanceError> {
        let listed: usize = batch_rows.iter().sum();
        if listed != mat.rows() {
            return Err(DistanceError::BatchRowsMismatch {
                rows_listed: listed,
                rows_held: mat.rows(),
            });
        }
        Ok(Self {
            objective,
            schedule_id,
            batch_rows,
            mat,
        })
    }

    pub fn objective(&self) -> ObjectiveKind {
        self.objective
    }

    pub fn schedule_id(&self) -> u64 {
        self.schedule_id
    }

    /// Rows contributed by each schedule batch, in schedule order.
    pub fn batch_rows(&self) -> &[usize] {
        &self.batch_rows
    }

    pub fn rows(&self) -> usize {
        self.mat.rows()
    }

    pub fn cols(&self) -> usize {
        self.mat.cols()
    }

    pub fn mat(&self) -> &Mat {
        &self.mat
    }

    /// The column-mean gradient vector `ḡ`.
    pub fn mean_gradient(&self) -> Vec<f64> {
        column_means(&self.mat)
    }

    /// Writes the matrix in the shared binary dump format (raw little-endian
    /// `f64` plus a JSON sidecar naming the objective and schedule).
    pub fn dump(&self, path: &std::path::Path) -> Result<(), DistanceError> {
        let tags = json!({
            "kind": "gradient",
            "objective": self.objective.name(),
            "schedule_id": self.schedule_id,
            "batch_rows": self.batch_rows,
        });
        Ok(dump_matrix(path, &self.mat, tags)?)
    }

    /// Loads a matrix written by [`GradientMatrix::dump`].
    pub fn load(path: &std::path::Path) -> Result<Self, DistanceError> {
        let (mat, sidecar) = load_matrix(path)?;
        let objective = sidecar.tags["objective"]
            .as_str()
            .and_then(ObjectiveKind::parse)
            .ok_or(DistanceError::MissingTag("objective"))?;
        let schedule_id = sidecar.tags["schedule_id"]
            .as_u64()
            .ok_or(DistanceError::MissingTag("schedule_id"))?;
        let batch_rows = sidecar.tags["batch_rows"]
            .as_array()
            .and_then(|a| {
                a.iter()
                    .map(|v| v.as_u64().map(|n| n as usize))
                    .collect::<Option<Vec<usize>>>()
            })
            .ok_or(DistanceError::MissingTag("batch_rows"))?;
        Self::from_parts(objective, schedule_id, batch_rows, mat)
    }
}

fn column_means(mat: &Mat) -> Vec<f64> {
    let mut means = vec![0.0; mat.cols()];
    for r in 0..mat.rows() {
        for (m, v) in means.iter_mut().zip(mat.row(r)) {
            *m += v;
        }
    }
    let n = mat.rows() as f64;
    means.iter_mut().for_each(|m| *m /= n);
    means
}

/// Captures the per-sample gradient of `objective`'s mean loss at the
/// model's final hidden state, over every batch of `schedule`.
///
/// For each batch, the loss graph is built on the frozen model, the final
/// hidden node is watched, and one backward pass materializes its gradient
/// `[batch, seq, d_model]`; rows are then mean-pooled over non-padding
/// positions. Regular dropout is disabled (the capture is an evaluation of
/// the pretrained model, not a training step); contrastive objectives still
/// run their two augmented views with dropout active, because that noise is
/// part of the objective's definition, and the gradient is captured at the
/// first view's hidden state.
pub fn collect_gradients(
    model: &Model,
    objective: ObjectiveKind,
    schedule: &Schedule,
) -> Result<GradientMatrix, DistanceError> {
    let cfg = model.config();
    let obj_cfg = ObjectiveConfig::default();
    let d = cfg.d_model;
    let mut data: Vec<f64> = Vec::with_capacity(schedule.total_rows() * d);
    let mut batch_rows = Vec::with_capacity(schedule.batches().len());

    for (k, rows) in schedule.batches().iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(schedule.prep_seed(k, objective));
        let mut attempts = 0;
        let prepared = loop {
            match prepare_batch(objective, rows, cfg, &obj_cfg, &mut rng) {
                Ok(p) => break p,
                Err(ObjectiveError::NothingSelected) if attempts < PREP_RETRIES => {
                    attempts += 1;
                }
                Err(ObjectiveError::NothingSelected) => {
                    return Err(DistanceError::UnluckyBatch { batch: k, attempts });
                }
                Err(e) => return Err(e.into()),
            }
        };

        let graph = Graph::new();
        let binding = model.bind(&graph)?;
        let traced = build_traced_loss(model, &binding, &prepared, DropoutMode::Disabled)?;
        traced.hidden.watch();
        let mean_loss = traced.parts.mean()?;
        let grads = graph.backward(&mean_loss)?;
        let g = grads.get(&traced.hidden)?;
        let gdata = g.data();

        let input = &prepared.input;
        let (b, t) = (input.batch(), input.seq());
        for r in 0..b {
            let mut acc = vec![0.0; d];
            let mut count = 0.0;
            for pos in 0..t {
                if !input.is_real(r, pos) {
                    continue;
                }
                let base = (r * t + pos) * d;
                for (a, v) in acc.iter_mut().zip(&gdata[base..base + d]) {
                    *a += v;
                }
                count += 1.0;
            }
            data.extend(acc.iter().map(|a| a / count));
        }
        batch_rows.push(b);
    }

    let rows = data.len() / d;
    GradientMatrix::from_parts(objective, schedule.id(), batch_rows, Mat::new(rows, d, data)?)
}

fn check_comparable(a: &GradientMatrix, b: &GradientMatrix) -> Result<(), DistanceError> {
    if a.schedule_id != b.schedule_id {
        return Err(DistanceError::ScheduleMismatch);
    }
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(DistanceError::ShapeMismatch {
            lhs: (a.rows(), a.cols()),
            rhs: (b.rows(), b.cols()),
        });
    }
    Ok(())
}

/// Alignment-invariant distance between two stacked gradient matrices:
/// both are centered and Frobenius-normalized, then the residual after the
/// best orthogonal alignment is returned (`0` identical up to rotation,
/// `√2` uncorrelated).
pub fn gradient_procrustes(a: &GradientMatrix, b: &GradientMatrix) -> Result<f64, DistanceError> {
    check_comparable(a, b)?;
    Ok(procrustes_distance(a.mat(), b.mat())?)
}

/// Cosine dissimilarity `1 − cos(ḡ_A, ḡ_B)` of the mean gradient vectors,
/// in `[0, 2]`. Errors with [`DistanceError::IncoherentMean`] when either
/// mean is too small to define a direction.
pub fn cosine_distance_means(
    a: &GradientMatrix,
    b: &GradientMatrix,
) -> Result<f64, DistanceError> {
    check_comparable(a, b)?;
    let (ma, mb) = (a.mean_gradient(), b.mean_gradient());
    let na = ma.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = mb.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na <= NONZERO_THRESHOLD {
        return Err(DistanceError::IncoherentMean(a.objective.name()));
    }
    if nb <= NONZERO_THRESHOLD {
        return Err(DistanceError::IncoherentMean(b.objective.name()));
    }
    let dot: f64 = ma.iter().zip(&mb).map(|(x, y)| x * y).sum();
    Ok(1.0 - dot / (na * nb))
}

/// Pearson correlation between the two mean gradient vectors, paired over
/// hidden dimensions.
pub fn pearson_of_means(a: &GradientMatrix, b: &GradientMatrix) -> Result<f64, DistanceError> {
    check_comparable(a, b)?;
    Ok(pearson(&a.mean_gradient(), &b.mean_gradient())?)
}

/// Random projection to `dim` columns: `G · R / √dim` with `R` entries iid
/// standard normal drawn from `seed`. Pairwise geometry (norms, angles) is
/// approximately preserved, so distances recomputed after projection test
/// how much a metric leans on high-dimensional structure.
pub fn jl_project(
    g: &GradientMatrix,
    dim: usize,
    seed: u64,
) -> Result<GradientMatrix, DistanceError> {
    let d = g.cols();
    if dim == 0 || dim >= d {
        return Err(DistanceError::BadProjectionDim { dim, cols: d });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed));
    let r: Vec<f64> = (0..d * dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let scale = 1.0 / (dim as f64).sqrt();
    let n = g.rows();
    let mut out = vec![0.0; n * dim];
    for i in 0..n {
        let row = g.mat().row(i);
        let orow = &mut out[i * dim..(i + 1) * dim];
        for (j, &x) in row.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let rrow = &r[j * dim..(j + 1) * dim];
            for (o, &rv) in orow.iter_mut().zip(rrow) {
                *o += x * rv;
            }
        }
        orow.iter_mut().for_each(|o| *o *= scale);
    }
    GradientMatrix::from_parts(
        g.objective,
        g.schedule_id,
        g.batch_rows.clone(),
        Mat::new(n, dim, out)?,
    )
}

/// Agreement statistics of the per-sample gradient rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoherenceStats {
    /// Mean L2 norm of the rows.
    pub per_sample_norm_mean: f64,
    /// `‖ḡ‖ / mean‖gᵢ‖ ∈ [0, 1]`: 1 when every sample pushes the same way,
    /// 0 when pushes cancel exactly.
    pub coherence: f64,
    /// Fraction of entries whose magnitude exceeds [`NONZERO_THRESHOLD`].
    pub nonzero_fraction: f64,
}

/// Computes [`CoherenceStats`] over a gradient matrix with at least two rows.
pub fn coherence_stats(g: &GradientMatrix) -> Result<CoherenceStats, DistanceError> {
    let n = g.rows();
    if n < 2 {
        return Err(DistanceError::TooFew {
            what: "gradient rows",
            need: 2,
            got: n,
        });
    }
    let mat = g.mat();
    let mut norm_sum = 0.0;
    let mut nonzero = 0usize;
    for i in 0..n {
        let row = mat.row(i);
        norm_sum += row.iter().map(|v| v * v).sum::<f64>().sqrt();
        nonzero += row.iter().filter(|v| v.abs() > NONZERO_THRESHOLD).count();
    }
    let mean_norm = norm_sum / n as f64;
    let mean = g.mean_gradient();
    let mean_len = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    // ‖ḡ‖ ≤ mean‖gᵢ‖ by the triangle inequality; the min only clips the
    // last-bit float excess.
    let coherence = if mean_norm > 0.0 {
        (mean_len / mean_norm).min(1.0)
    } else {
        0.0
    };
    Ok(CoherenceStats {
        per_sample_norm_mean: mean_norm,
        coherence,
        nonzero_fraction: nonzero as f64 / (n * g.cols()) as f64,
    })
}

/// Deterministically shuffles batch indices `0..n_batches` and splits them
/// into two near-halves (the first gets the extra batch when odd). Each
/// half is returned in ascending order so restrictions preserve schedule
/// order.
pub fn split_batches(
    n_batches: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), DistanceError> {
    if n_batches < 2 {
        return Err(DistanceError::TooFew {
            what: "batches",
            need: 2,
            got: n_batches,
        });
    }
    let mut idx: Vec<usize> = (0..n_batches).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix(seed)));
    let mid = n_batches.div_ceil(2);
    let (a, b) = idx.split_at(mid);
    let mut first = a.to_vec();
    let mut second = b.to_vec();
    first.sort_unstable();
    second.sort_unstable();
    Ok((first, second))
}

/// Restricts a gradient matrix to the row blocks of the given schedule
/// batches. The result carries a sub-schedule id derived from the original,
/// so restrictions of different matrices to the *same* batches stay
/// comparable while accidental full-vs-half comparisons are rejected.
pub fn restrict_to_batches(
    g: &GradientMatrix,
    keep: &[usize],
) -> Result<GradientMatrix, DistanceError> {
    if keep.is_empty() {
        return Err(DistanceError::TooFew {
            what: "kept batches",
            need: 1,
            got: 0,
        });
    }
    let mut starts = Vec::with_capacity(g.batch_rows.len());
    let mut acc = 0;
    for &rows in &g.batch_rows {
        starts.push(acc);
        acc += rows;
    }
    let cols = g.cols();
    let mut data = Vec::new();
    let mut batch_rows = Vec::with_capacity(keep.len());
    let mut sub_id = fnv_bytes(g.schedule_id, b"restrict");
    for &k in keep {
        if k >= g.batch_rows.len() {
            return Err(DistanceError::BatchOutOfRange {
                index: k,
                batches: g.batch_rows.len(),
            });
        }
        let (start, rows) = (starts[k], g.batch_rows[k]);
        data.extend_from_slice(
            &g.mat().data()[start * cols..(start + rows) * cols],
        );
        batch_rows.push(rows);
        sub_id = fnv_bytes(sub_id, &(k as u64).to_le_bytes());
    }
    let n = data.len() / cols;
    GradientMatrix::from_parts(g.objective, sub_id, batch_rows, Mat::new(n, cols, data)?)
}

/// Splits the schedule's batches into two random halves, computes the
/// reference-to-objective distance ordering on each half independently,
/// and returns the Spearman rank correlation between the two orderings —
/// `1.0` when the ranking is stable under resampling.
pub fn split_half_reliability<F>(
    reference: &GradientMatrix,
    others: &[GradientMatrix],
    seed: u64,
    mut distance: F,
) -> Result<f64, DistanceError>
where
    F: FnMut(&GradientMatrix, &GradientMatrix) -> Result<f64, DistanceError>,
{
    if others.len() < 3 {
        return Err(DistanceError::TooFew {
            what: "objectives",
            need: 3,
            got: others.len(),
        });
    }
    for o in others {
        check_comparable(reference, o)?;
    }
    let (first, second) = split_batches(reference.batch_rows.len(), seed)?;
    let mut half_distances = |keep: &[usize]| -> Result<Vec<f64>, DistanceError> {
        let ref_half = restrict_to_batches(reference, keep)?;
        others
            .iter()
            .map(|o| distance(&ref_half, &restrict_to_batches(o, keep)?))
            .collect()
    };
    let da = half_distances(&first)?;
    let db = half_distances(&second)?;
    Ok(spearman(&da, &db)?)
}

/// Knobs for [`distance_report`]: which projection widths to evaluate the
/// cosine distance at, and the projection seed.
#[derive(Debug, Clone)]
pub struct ReportConfig {
    pub jl_dims: Vec<usize>,
    pub jl_seed: u64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            jl_dims: vec![128, 32],
            jl_seed: 7,
        }
    }
}

/// One objective's distances to the reference, plus its own gradient
/// statistics. Cosine and Pearson entries are `None` when a mean gradient
/// is too small to define a direction (an incoherent, self-cancelling
/// objective).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveDistanceRow {
    pub objective: String,
    pub procrustes: f64,
    pub cosine_full: Option<f64>,
    /// Cosine distances after projection, parallel to the report's
    /// `jl_dims`.
    pub cosine_jl: Vec<Option<f64>>,
    pub pearson_means: Option<f64>,
    pub per_sample_norm_mean: f64,
    pub coherence: f64,
    pub nonzero_fraction: f64,
}

/// Distances from one reference objective to each probe objective on a
/// fixed model and schedule. The reference appears first with distance 0
/// by definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub reference: String,
    pub schedule_id: u64,
    pub jl_dims: Vec<usize>,
    pub jl_seed: u64,
    pub rows: Vec<ObjectiveDistanceRow>,
}

fn optional_cosine(
    a: &GradientMatrix,
    b: &GradientMatrix,
) -> Result<Option<f64>, DistanceError> {
    match cosine_distance_means(a, b) {
        Ok(v) => Ok(Some(v)),
        Err(DistanceError::IncoherentMean(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn optional_pearson(
    a: &GradientMatrix,
    b: &GradientMatrix,
) -> Result<Option<f64>, DistanceError> {
    match pearson_of_means(a, b) {
        Ok(v) => Ok(Some(v)),
        Err(DistanceError::Stats(StatsError::ZeroVariance)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Collects gradients for the reference and each probe objective over the
/// same schedule and assembles the full distance table.
pub fn distance_report(
    model: &Model,
    reference: ObjectiveKind,
    others: &[ObjectiveKind],
    schedule: &Schedule,
    cfg: &ReportConfig,
) -> Result<DistanceReport, DistanceError> {
    for &dim in &cfg.jl_dims {
        if dim == 0 || dim >= model.config().d_model {
            return Err(DistanceError::BadProjectionDim {
                dim,
                cols: model.config().d_model,
            });
        }
    }
    let g_ref = collect_gradients(model, reference, schedule)?;
    let ref_proj: Vec<GradientMatrix> = cfg
        .jl_dims
        .iter()
        .map(|&dim| jl_project(&g_ref, dim, cfg.jl_seed))
        .collect::<Result<_, _>>()?;

    let mut rows = Vec::with_capacity(1 + others.len());
    let ref_stats = coherence_stats(&g_ref)?;
    rows.push(ObjectiveDistanceRow {
        objective: reference.name().to_string(),
        // The reference is at distance zero from itself by definition; the
        // measured numbers would only add the metric's own float noise.
        procrustes: 0.0,
        cosine_full: Some(0.0),
        cosine_jl: vec![Some(0.0); cfg.jl_dims.len()],
        pearson_means: Some(1.0),
        per_sample_norm_mean: ref_stats.per_sample_norm_mean,
        coherence: ref_stats.coherence,
        nonzero_fraction: ref_stats.nonzero_fraction,
    });

    for &objective in others {
        let g = collect_gradients(model, objective, schedule)?;
        let stats = coherence_stats(&g)?;
        let cosine_jl = cfg
            .jl_dims
            .iter()
            .zip(&ref_proj)
            .map(|(&dim, rp)| optional_cosine(rp, &jl_project(&g, dim, cfg.jl_seed)?))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(ObjectiveDistanceRow {
            objective: objective.name().to_string(),
            procrustes: gradient_procrustes(&g_ref, &g)?,
            cosine_full: optional_cosine(&g_ref, &g)?,
            cosine_jl,
            pearson_means: optional_pearson(&g_ref, &g)?,
            per_sample_norm_mean: stats.per_sample_norm_mean,
            coherence: stats.coherence,
            nonzero_fraction: stats.nonzero_fraction,
        });
    }

    Ok(DistanceReport {
        reference: reference.name().to_string(),
        schedule_id: schedule.id(),
        jl_dims: cfg.jl_dims.clone(),
        jl_seed: cfg.jl_seed,
        rows,
    })
}
