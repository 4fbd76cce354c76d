//! Singular values and orthogonal polar factors via one-sided Jacobi.
//!
//! The metric stack needs two things from small dense matrices: the
//! singular-value sum of cross-covariances, and the orthogonal polar factor
//! `R* = U·Vᵀ` that optimally aligns one activation matrix to another.
//! One-sided Jacobi is compact, numerically robust in 64-bit floats, and
//! converges quadratically: rotate column pairs until all columns are
//! mutually orthogonal, then read singular values off as column norms. The
//! accumulated rotations are the right factor `V`; the normalized working
//! columns are the left factor `U`.

const MAX_SWEEPS: usize = 64;
const TOL: f64 = 1e-15;

/// Runs column-pair rotations on `a` until convergence.
///
/// Returns the rotated working columns (each of length `rows`, mutually
/// orthogonal, with norms equal to the singular values) and the accumulated
/// right-rotation columns (each of length `cols`, orthonormal).
fn one_sided_jacobi(a: &[f64], rows: usize, cols: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    debug_assert_eq!(a.len(), rows * cols);
    // Column-major working copy: rotations touch column pairs.
    let mut w: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| a[i * cols + j]).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..cols).map(|i| f64::from(u8::from(i == j))).collect())
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..cols {
            for j in (i + 1)..cols {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for r in 0..rows {
                    alpha += w[i][r] * w[i][r];
                    beta += w[j][r] * w[j][r];
                    gamma += w[i][r] * w[j][r];
                }
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                if gamma.abs() <= TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                // Jacobi rotation annihilating the off-diagonal gamma.
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..rows {
                    let wi = w[i][r];
                    let wj = w[j][r];
                    w[i][r] = c * wi - s * wj;
                    w[j][r] = s * wi + c * wj;
                }
                for r in 0..cols {
                    let vi = v[i][r];
                    let vj = v[j][r];
                    v[i][r] = c * vi - s * vj;
                    v[j][r] = s * vi + c * vj;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    (w, v)
}

/// Singular values of a row-major `rows × cols` matrix, unsorted.
///
/// Converges when every column pair satisfies
/// `|aᵢ·aⱼ| ≤ 1e-15·‖aᵢ‖·‖aⱼ‖`; zero columns yield zero singular values.
#[cfg_attr(not(test), allow(dead_code))] // exercised by the identity checks
pub(crate) fn singular_values(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let (w, _) = one_sided_jacobi(a, rows, cols);
    w.iter()
        .map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect()
}

/// The orthogonal polar factor `R = U·Vᵀ` of a square row-major `n × n`
/// matrix `A = U·Σ·Vᵀ` — the orthogonal matrix nearest to `A`, and the
/// minimizer of `‖X − Y·R‖_F` when `A = YᵀX`. Returned row-major.
///
/// Singular directions with σ below `1e-13·σ_max` carry no signal; their
/// left vectors are replaced by an orthonormal completion, which leaves the
/// attained alignment residual unchanged (any completion is a minimizer).
pub(crate) fn orthogonal_polar_factor(a: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), n * n);
    let (w, v) = one_sided_jacobi(a, n, n);
    let sigma: Vec<f64> = w
        .iter()
        .map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let floor = 1e-13 * sigma.iter().cloned().fold(0.0, f64::max);

    let mut u: Vec<Option<Vec<f64>>> = w
        .into_iter()
        .zip(&sigma)
        .map(|(col, &s)| (s > floor).then(|| col.iter().map(|x| x / s).collect()))
        .collect();

    // Complete null directions to an orthonormal basis: for each missing
    // column, orthogonalize the best-conditioned standard basis vector
    // against everything already present.
    for j in 0..n {
        if u[j].is_some() {
            continue;
        }
        let mut best: Option<Vec<f64>> = None;
        let mut best_norm = 0.0;
        for k in 0..n {
            let mut cand = vec![0.0; n];
            cand[k] = 1.0;
            for col in u.iter().flatten() {
                let dot: f64 = col.iter().zip(&cand).map(|(a, b)| a * b).sum();
                for (c, &uc) in cand.iter_mut().zip(col) {
                    *c -= dot * uc;
                }
            }
            let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > best_norm {
                best_norm = norm;
                best = Some(cand);
            }
        }
        let mut col = best.expect("a square basis always has a residual direction");
        for x in col.iter_mut() {
            *x /= best_norm;
        }
        u[j] = Some(col);
    }

    // R = U·Vᵀ, accumulated over the shared singular-direction index.
    let mut r = vec![0.0; n * n];
    for (uj, vj) in u.iter().flatten().zip(&v) {
        for (i, &ui) in uj.iter().enumerate() {
            let row = &mut r[i * n..(i + 1) * n];
            for (rv, &vv) in row.iter_mut().zip(vj) {
                *rv += ui * vv;
            }
        }
    }
    r
}
