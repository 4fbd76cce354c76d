//! Representation-drift metrics between activation matrices, depth profiles,
//! and least-squares depth-slope fits.
//!
//! All metrics share one preprocessing contract: activation matrices are
//! column-centered and (for Procrustes) Frobenius-normalized, so the
//! orthogonal-Procrustes distance lives in `[0, √2]` — `0` for rotations of
//! the same configuration, `√2` for uncorrelated ones.

mod svd;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::{self, StatsError};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("matrix dimensions {lhs:?} and {rhs:?} do not agree")]
    DimMismatch {
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("matrix is degenerate after centering (all rows equal or empty)")]
    Degenerate,

    #[error("non-finite activation value encountered")]
    NonFinite,

    #[error("need at least {need} rows, got {got}")]
    TooFewRows { need: usize, got: usize },

    #[error("profile entry {value} at index {index} is not a finite non-negative number")]
    BadProfileEntry { index: usize, value: f64 },

    #[error("profile sums to zero; fractions are undefined")]
    ZeroProfile,

    #[error("slope undefined: depth values have zero variance")]
    DegenerateAbscissa,

    #[error("matrix payload holds {got} bytes, but the sidecar promises {rows}×{cols} ({want} bytes)")]
    PayloadSize {
        rows: usize,
        cols: usize,
        want: usize,
        got: usize,
    },

    #[error("matrix sidecar is invalid: {0}")]
    Sidecar(String),

    #[error("matrix i/o failed: {0}")]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// A dense row-major matrix of activations or gradients: one row per input.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, MetricError> {
        if data.len() != rows * cols {
            return Err(MetricError::DimMismatch {
                lhs: (rows, cols),
                rhs: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `selfᵀ · other` as a `cols × other.cols` matrix.
    fn t_dot(&self, other: &Mat) -> Mat {
        debug_assert_eq!(self.rows, other.rows);
        let (m, n) = (self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for r in 0..self.rows {
            let arow = self.row(r);
            let brow = other.row(r);
            for (i, &ai) in arow.iter().enumerate() {
                if ai == 0.0 {
                    continue;
                }
                let orow = &mut out[i * n..(i + 1) * n];
                for (ov, &bv) in orow.iter_mut().zip(brow) {
                    *ov += ai * bv;
                }
            }
        }
        Mat {
            rows: m,
            cols: n,
            data: out,
        }
    }
}

/// Column-centers a matrix (subtracts each column's mean).
fn center_columns(m: &Mat) -> Mat {
    let mut out = m.clone();
    for j in 0..m.cols {
        let mut mean = 0.0;
        for i in 0..m.rows {
            mean += m.get(i, j);
        }
        mean /= m.rows as f64;
        for i in 0..m.rows {
            out.data[i * m.cols + j] -= mean;
        }
    }
    out
}

/// Shared metric preprocessing: column-center, then scale to unit Frobenius
/// norm. Errors on empty, non-finite, or (after centering) all-zero input.
pub fn preprocess(m: &Mat) -> Result<Mat, MetricError> {
    if m.rows == 0 || m.cols == 0 {
        return Err(MetricError::Degenerate);
    }
    if !m.all_finite() {
        return Err(MetricError::NonFinite);
    }
    let mut centered = center_columns(m);
    let norm = centered.frobenius_norm();
    if norm == 0.0 {
        return Err(MetricError::Degenerate);
    }
    for v in centered.data.iter_mut() {
        *v /= norm;
    }
    Ok(centered)
}

/// Orthogonal-Procrustes distance between two same-shape activation matrices:
/// the residual `‖X̃ − Ỹ·R*‖_F` at the optimal rotation `R* = U·Vᵀ`, where
/// `U·Σ·Vᵀ` is the SVD of `ỸᵀX̃` on preprocessed inputs.
///
/// The residual is evaluated entrywise rather than through the algebraically
/// equivalent shortcut `Δ² = 2 − 2·Σᵢσᵢ`: the subtraction happens before
/// squaring, so near-identical inputs land at ~1e-14 instead of at the
/// `√(2 − 2·Σσ)` rounding floor of ~1e-7. The shortcut identity is kept
/// alive as a cross-check in the test suite.
pub fn procrustes_distance(x: &Mat, y: &Mat) -> Result<f64, MetricError> {
    if x.rows != y.rows || x.cols != y.cols {
        return Err(MetricError::DimMismatch {
            lhs: (x.rows, x.cols),
            rhs: (y.rows, y.cols),
        });
    }
    let xt = preprocess(x)?;
    let yt = preprocess(y)?;
    let cross = yt.t_dot(&xt); // D × D
    let d = cross.cols;
    let rot = svd::orthogonal_polar_factor(&cross.data, d);
    let mut residual_sq = 0.0;
    for r in 0..xt.rows {
        let xrow = xt.row(r);
        let yrow = yt.row(r);
        for (j, &xv) in xrow.iter().enumerate() {
            let aligned: f64 = yrow
                .iter()
                .zip(rot[j..].iter().step_by(d))
                .map(|(&yv, &rv)| yv * rv)
                .sum();
            let diff = xv - aligned;
            residual_sq += diff * diff;
        }
    }
    Ok(residual_sq.sqrt())
}

/// Linear centered-kernel-alignment similarity in `[0, 1]`:
/// `‖YᵀX‖²_F / (‖XᵀX‖_F · ‖YᵀY‖_F)` on column-centered inputs.
/// The feature dimensions may differ; the row counts may not.
pub fn linear_cka(x: &Mat, y: &Mat) -> Result<f64, MetricError> {
    if x.rows != y.rows {
        return Err(MetricError::DimMismatch {
            lhs: (x.rows, x.cols),
            rhs: (y.rows, y.cols),
        });
    }
    if x.rows == 0 || x.cols == 0 || y.cols == 0 {
        return Err(MetricError::Degenerate);
    }
    if !x.all_finite() || !y.all_finite() {
        return Err(MetricError::NonFinite);
    }
    let xc = center_columns(x);
    let yc = center_columns(y);
    let cross_sq = {
        let c = yc.t_dot(&xc);
        c.data.iter().map(|v| v * v).sum::<f64>()
    };
    let x_self = xc.t_dot(&xc).frobenius_norm();
    let y_self = yc.t_dot(&yc).frobenius_norm();
    if x_self == 0.0 || y_self == 0.0 {
        return Err(MetricError::Degenerate);
    }
    Ok(cross_sq / (x_self * y_self))
}

/// CKA *distance*: `1 − linear_cka`.
pub fn cka_distance(x: &Mat, y: &Mat) -> Result<f64, MetricError> {
    Ok(1.0 - linear_cka(x, y)?)
}

/// Condensed (upper-triangular) Euclidean distance vector between rows.
fn condensed_distances(m: &Mat) -> Vec<f64> {
    let n = m.rows;
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = m
                .row(i)
                .iter()
                .zip(m.row(j))
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            out.push(d);
        }
    }
    out
}

/// Representational-similarity distance: one minus the Spearman correlation
/// between the two row-wise Euclidean dissimilarity structures.
pub fn rsa_distance(x: &Mat, y: &Mat) -> Result<f64, MetricError> {
    if x.rows != y.rows {
        return Err(MetricError::DimMismatch {
            lhs: (x.rows, x.cols),
            rhs: (y.rows, y.cols),
        });
    }
    if x.rows < 3 {
        return Err(MetricError::TooFewRows {
            need: 3,
            got: x.rows,
        });
    }
    if !x.all_finite() || !y.all_finite() {
        return Err(MetricError::NonFinite);
    }
    let dx = condensed_distances(x);
    let dy = condensed_distances(y);
    Ok(1.0 - stats::spearman(&dx, &dy)?)
}

/// An ordinary-least-squares line fit `y = slope·x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square of the fit residuals.
    pub residual_rms: f64,
}

/// Fits a line through `(x, y)` pairs; needs ≥ 2 points and non-constant `x`.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<SlopeFit, MetricError> {
    if xs.len() != ys.len() {
        return Err(MetricError::DimMismatch {
            lhs: (xs.len(), 1),
            rhs: (ys.len(), 1),
        });
    }
    if xs.len() < 2 {
        return Err(MetricError::TooFewRows {
            need: 2,
            got: xs.len(),
        });
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|&x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(MetricError::DegenerateAbscissa);
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(&x, &y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| {
            let r = y - (slope * x + intercept);
            r * r
        })
        .sum();
    Ok(SlopeFit {
        slope,
        intercept,
        residual_rms: (ss_res / n).sqrt(),
    })
}

/// Rescales non-negative per-depth changes into fractions that sum to one.
pub fn normalize_profile(values: &[f64]) -> Result<Vec<f64>, MetricError> {
    for (index, &value) in values.iter().enumerate() {
        if !value.is_finite() || value < 0.0 {
            return Err(MetricError::BadProfileEntry { index, value });
        }
    }
    let sum: f64 = values.iter().sum();
    if sum == 0.0 {
        return Err(MetricError::ZeroProfile);
    }
    Ok(values.iter().map(|&v| v / sum).collect())
}

/// Which drift metric a profile was measured with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Procrustes,
    Cka,
    Rsa,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [MetricKind::Procrustes, MetricKind::Cka, MetricKind::Rsa];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Procrustes => "procrustes",
            MetricKind::Cka => "cka",
            MetricKind::Rsa => "rsa",
        }
    }
}

/// Drift as a function of relative depth, for one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthProfile {
    pub metric: MetricKind,
    /// `(relative depth in (0, 1], drift value)`, ascending in depth.
    pub points: Vec<(f64, f64)>,
}

impl DepthProfile {
    /// The least-squares depth slope (the "locality gradient"): positive when
    /// drift concentrates toward the output.
    pub fn slope(&self) -> Result<SlopeFit, MetricError> {
        let (xs, ys): (Vec<f64>, Vec<f64>) = self.points.iter().cloned().unzip();
        fit_line(&xs, &ys)
    }

    /// Per-depth fractions of total drift (they sum to one).
    pub fn normalized(&self) -> Result<Vec<f64>, MetricError> {
        let ys: Vec<f64> = self.points.iter().map(|&(_, y)| y).collect();
        normalize_profile(&ys)
    }

    /// The deepest point's share of total drift.
    pub fn final_fraction(&self) -> Result<f64, MetricError> {
        self.normalized()
            .map(|f| *f.last().expect("non-empty profile"))
    }
}

/// Shape and caller-defined metadata stored next to a binary matrix dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatSidecar {
    pub rows: usize,
    pub cols: usize,
    /// Free-form tags (depth, run id, objective, …) external tools can read.
    #[serde(default)]
    pub tags: serde_json::Value,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

/// Writes `mat` as raw little-endian `f64` bytes in row-major order at
/// `path`, plus a `<path>.json` sidecar holding the shape and `tags`.
pub fn dump_matrix(path: &Path, mat: &Mat, tags: serde_json::Value) -> Result<(), MetricError> {
    let mut bytes = Vec::with_capacity(mat.data.len() * 8);
    for v in &mat.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    let sidecar = MatSidecar {
        rows: mat.rows,
        cols: mat.cols,
        tags,
    };
    let json = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| MetricError::Sidecar(e.to_string()))?;
    std::fs::write(sidecar_path(path), json)?;
    Ok(())
}

/// Loads a matrix written by [`dump_matrix`], together with its sidecar.
pub fn load_matrix(path: &Path) -> Result<(Mat, MatSidecar), MetricError> {
    let json = std::fs::read_to_string(sidecar_path(path))?;
    let sidecar: MatSidecar =
        serde_json::from_str(&json).map_err(|e| MetricError::Sidecar(e.to_string()))?;
    let bytes = std::fs::read(path)?;
    let want = sidecar.rows * sidecar.cols * 8;
    if bytes.len() != want {
        return Err(MetricError::PayloadSize {
            rows: sidecar.rows,
            cols: sidecar.cols,
            want,
            got: bytes.len(),
        });
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("exact 8-byte chunk")))
        .collect();
    Ok((Mat::new(sidecar.rows, sidecar.cols, data)?, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Mat::new(rows, cols, data).unwrap()
    }

    /// Random rotation assembled from Givens rotations (always orthogonal,
    /// determinant +1).
    fn random_rotation(d: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut q = vec![0.0; d * d];
        for i in 0..d {
            q[i * d + i] = 1.0;
        }
        for a in 0..d {
            for b in (a + 1)..d {
                let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let (s, c) = theta.sin_cos();
                for r in 0..d {
                    let va = q[r * d + a];
                    let vb = q[r * d + b];
                    q[r * d + a] = c * va - s * vb;
                    q[r * d + b] = s * va + c * vb;
                }
            }
        }
        q
    }

    fn apply(m: &Mat, q: &[f64]) -> Mat {
        let d = m.cols();
        let mut out = Mat::zeros(m.rows(), d);
        for i in 0..m.rows() {
            for j in 0..d {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += m.get(i, k) * q[k * d + j];
                }
                out.data_mut()[i * d + j] = acc;
            }
        }
        out
    }

    #[test]
    fn preprocess_centers_and_normalizes() {
        let m = random_mat(7, 3, 1);
        let p = preprocess(&m).unwrap();
        for j in 0..3 {
            let mean: f64 = (0..7).map(|i| p.get(i, j)).sum::<f64>() / 7.0;
            assert!(mean.abs() < 1e-12);
        }
        assert!((p.frobenius_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn preprocess_rejects_constant_matrix() {
        let m = Mat::new(4, 2, vec![3.0; 8]).unwrap();
        assert!(matches!(
            preprocess(&m).unwrap_err(),
            MetricError::Degenerate
        ));
    }

    #[test]
    fn preprocess_rejects_non_finite() {
        let m = Mat::new(2, 2, vec![1.0, 2.0, f64::NAN, 0.0]).unwrap();
        assert!(matches!(preprocess(&m).unwrap_err(), MetricError::NonFinite));
    }

    #[test]
    fn procrustes_self_distance_is_zero() {
        let m = random_mat(20, 5, 2);
        assert!(procrustes_distance(&m, &m).unwrap() < 1e-12);
    }

    #[test]
    fn procrustes_is_rotation_invariant() {
        for seed in 0..8 {
            let m = random_mat(24, 6, 3 + seed);
            let q = random_rotation(6, 33 + seed);
            let rotated = apply(&m, &q);
            assert!(procrustes_distance(&m, &rotated).unwrap() < 1e-10);
        }
    }

    /// Dual route: the entrywise residual must agree with the singular-value
    /// identity `Δ² = 2 − 2·Σσ(ỸᵀX̃)` away from the identity's rounding
    /// floor.
    #[test]
    fn procrustes_residual_matches_singular_value_identity() {
        for seed in 0..8 {
            let x = random_mat(18, 5, 500 + seed);
            let y = random_mat(18, 5, 600 + seed);
            let direct = procrustes_distance(&x, &y).unwrap();
            let cross = preprocess(&y).unwrap().t_dot(&preprocess(&x).unwrap());
            let sigma_sum: f64 = svd::singular_values(&cross.data, cross.rows, cross.cols)
                .iter()
                .sum();
            let shortcut = (2.0 - 2.0 * sigma_sum).max(0.0).sqrt();
            assert!(
                (direct - shortcut).abs() < 1e-10,
                "residual {direct} vs identity {shortcut}"
            );
        }
    }

    #[test]
    fn procrustes_is_symmetric_and_bounded() {
        for seed in 0..8 {
            let x = random_mat(30, 4, 100 + seed);
            let y = random_mat(30, 4, 200 + seed);
            let dxy = procrustes_distance(&x, &y).unwrap();
            let dyx = procrustes_distance(&y, &x).unwrap();
            assert!((dxy - dyx).abs() < 1e-10);
            assert!((0.0..=2f64.sqrt() + 1e-12).contains(&dxy));
        }
    }

    #[test]
    fn procrustes_rejects_shape_mismatch() {
        let x = random_mat(5, 3, 4);
        let y = random_mat(5, 4, 5);
        assert!(matches!(
            procrustes_distance(&x, &y).unwrap_err(),
            MetricError::DimMismatch { .. }
        ));
    }

    #[test]
    fn cka_self_similarity_is_one() {
        let m = random_mat(15, 6, 6);
        assert!((linear_cka(&m, &m).unwrap() - 1.0).abs() < 1e-12);
        assert!(cka_distance(&m, &m).unwrap().abs() < 1e-12);
    }

    #[test]
    fn cka_invariant_under_orthogonal_and_isotropic_scale() {
        let x = random_mat(25, 5, 7);
        let y = random_mat(25, 5, 8);
        let base = linear_cka(&x, &y).unwrap();
        let q = random_rotation(5, 77);
        let mut y2 = apply(&y, &q);
        for v in y2.data_mut().iter_mut() {
            *v *= 3.7; // isotropic scale
        }
        let transformed = linear_cka(&x, &y2).unwrap();
        assert!((base - transformed).abs() < 1e-10);
    }

    #[test]
    fn cka_bounded_in_unit_interval() {
        for seed in 0..8 {
            let x = random_mat(12, 5, 300 + seed);
            let y = random_mat(12, 7, 400 + seed);
            let v = linear_cka(&x, &y).unwrap();
            assert!((0.0..=1.0 + 1e-12).contains(&v), "cka {v} out of range");
        }
    }

    #[test]
    fn rsa_zero_for_rigid_motions_and_scales() {
        let x = random_mat(10, 4, 9);
        let q = random_rotation(4, 99);
        let mut y = apply(&x, &q);
        for v in y.data_mut().iter_mut() {
            *v *= 2.5;
        }
        assert!(rsa_distance(&x, &y).unwrap().abs() < 1e-12);
    }

    #[test]
    fn rsa_requires_three_rows() {
        let x = random_mat(2, 4, 10);
        assert!(matches!(
            rsa_distance(&x, &x).unwrap_err(),
            MetricError::TooFewRows { need: 3, .. }
        ));
    }

    #[test]
    fn fit_line_recovers_exact_line() {
        let xs = [0.1, 0.25, 0.4, 0.6, 0.75, 0.9, 1.0];
        let ys: Vec<f64> = xs.iter().map(|&x| 2.5 * x - 0.3).collect();
        let fit = fit_line(&xs, &ys).unwrap();
        assert!((fit.slope - 2.5).abs() < 1e-12);
        assert!((fit.intercept + 0.3).abs() < 1e-12);
        assert!(fit.residual_rms < 1e-12);
    }

    #[test]
    fn fit_line_rejects_degenerate_abscissa() {
        assert!(matches!(
            fit_line(&[0.5, 0.5], &[1.0, 2.0]).unwrap_err(),
            MetricError::DegenerateAbscissa
        ));
    }

    #[test]
    fn normalize_profile_sums_to_one() {
        let f = normalize_profile(&[1.0, 3.0, 4.0]).unwrap();
        assert_eq!(f, vec![0.125, 0.375, 0.5]);
        assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn normalize_profile_rejects_bad_entries() {
        assert!(matches!(
            normalize_profile(&[1.0, -0.1]).unwrap_err(),
            MetricError::BadProfileEntry { index: 1, .. }
        ));
        assert!(matches!(
            normalize_profile(&[0.0, 0.0]).unwrap_err(),
            MetricError::ZeroProfile
        ));
    }

    #[test]
    fn depth_profile_slope_and_final_fraction() {
        let profile = DepthProfile {
            metric: MetricKind::Procrustes,
            points: vec![(0.25, 0.1), (0.5, 0.2), (0.75, 0.3), (1.0, 0.4)],
        };
        let fit = profile.slope().unwrap();
        assert!((fit.slope - 0.4).abs() < 1e-12);
        assert!((profile.final_fraction().unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn matrix_dump_round_trips_bitwise_with_tags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("acts.f64");
        let mat = random_mat(7, 3, 99);
        let tags = serde_json::json!({"depth": 0.75, "run": "demo"});
        dump_matrix(&path, &mat, tags.clone()).unwrap();
        let (back, sidecar) = load_matrix(&path).unwrap();
        assert_eq!(back, mat);
        assert_eq!(sidecar.rows, 7);
        assert_eq!(sidecar.cols, 3);
        assert_eq!(sidecar.tags, tags);
    }

    #[test]
    fn truncated_matrix_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("acts.f64");
        let mat = random_mat(4, 2, 1);
        dump_matrix(&path, &mat, serde_json::Value::Null).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(
            load_matrix(&path).unwrap_err(),
            MetricError::PayloadSize { .. }
        ));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn procrustes_triangle_of_bounds(seed in 0u64..1000) {
                let x = random_mat(16, 3, seed);
                let y = random_mat(16, 3, seed + 5000);
                let d = procrustes_distance(&x, &y).unwrap();
                prop_assert!(d >= 0.0 && d <= 2f64.sqrt() + 1e-12);
            }

            #[test]
            fn cka_symmetry(seed in 0u64..1000) {
                let x = random_mat(12, 4, seed);
                let y = random_mat(12, 4, seed + 9000);
                let a = linear_cka(&x, &y).unwrap();
                let b = linear_cka(&y, &x).unwrap();
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
