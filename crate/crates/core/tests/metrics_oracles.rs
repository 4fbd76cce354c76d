//! Independent oracles for the drift metrics.
//!
//! Each oracle recomputes a metric by a structurally different route — a
//! brute-force search over the full orthogonal group for the Procrustes
//! distance, and an explicit kernel-matrix (HSIC) construction for linear
//! CKA — and demands agreement with the production implementations. The
//! oracle code deliberately duplicates preprocessing instead of calling into
//! the library, so a bug in the shared path cannot cancel itself out.

use plab_core::metrics::{cka_distance, linear_cka, procrustes_distance, rsa_distance, Mat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian_mat(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Mat::new(rows, cols, data).unwrap()
}

fn uniform_mat(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Mat::new(rows, cols, data).unwrap()
}

/// Oracle-side preprocessing, written from scratch: column-center then scale
/// to unit Frobenius norm. Returns rows as plain vectors.
fn oracle_preprocess(m: &Mat) -> Vec<Vec<f64>> {
    let (n, d) = (m.rows(), m.cols());
    let mut rows: Vec<Vec<f64>> = (0..n).map(|i| m.row(i).to_vec()).collect();
    for j in 0..d {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        for r in rows.iter_mut() {
            r[j] -= mean;
        }
    }
    let norm = rows
        .iter()
        .flat_map(|r| r.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    for r in rows.iter_mut() {
        for v in r.iter_mut() {
            *v /= norm;
        }
    }
    rows
}

/// Brute-force Procrustes for two-column matrices: scan a dense grid over
/// both connected components of O(2) — rotations `[[c,−s],[s,c]]` and
/// reflections `[[c,s],[s,−c]]` — and return the smallest residual
/// `‖X̃ − ỸR‖_F` found.
fn brute_force_procrustes_2d(x: &Mat, y: &Mat) -> f64 {
    assert_eq!(x.cols(), 2);
    let xt = oracle_preprocess(x);
    let yt = oracle_preprocess(y);
    const STEPS: usize = 500_000;
    let mut best = f64::INFINITY;
    for k in 0..STEPS {
        let theta = std::f64::consts::TAU * k as f64 / STEPS as f64;
        let (s, c) = theta.sin_cos();
        let mut rot = 0.0;
        let mut refl = 0.0;
        for (xr, yr) in xt.iter().zip(&yt) {
            let (y0, y1) = (yr[0], yr[1]);
            // row · rotation
            let (r0, r1) = (y0 * c + y1 * s, -y0 * s + y1 * c);
            rot += (xr[0] - r0) * (xr[0] - r0) + (xr[1] - r1) * (xr[1] - r1);
            // row · reflection
            let (f0, f1) = (y0 * c + y1 * s, y0 * s - y1 * c);
            refl += (xr[0] - f0) * (xr[0] - f0) + (xr[1] - f1) * (xr[1] - f1);
        }
        best = best.min(rot.min(refl));
    }
    best.sqrt()
}

#[test]
fn procrustes_matches_orthogonal_grid_search() {
    for seed in 0..4u64 {
        let x = uniform_mat(6, 2, 10 + seed);
        let y = uniform_mat(6, 2, 90 + seed);
        let analytic = procrustes_distance(&x, &y).unwrap();
        let brute = brute_force_procrustes_2d(&x, &y);
        assert!(
            (analytic - brute).abs() < 1e-5,
            "seed {seed}: analytic {analytic} vs grid {brute}"
        );
        // The grid can only over-estimate the true minimum.
        assert!(analytic <= brute + 1e-9);
    }
}

#[test]
fn procrustes_grid_confirms_zero_for_rotated_and_reflected_copies() {
    let x = uniform_mat(6, 2, 42);
    // Rotate by an arbitrary fixed angle.
    let theta: f64 = 0.83;
    let (s, c) = theta.sin_cos();
    let rotated = {
        let mut data = Vec::with_capacity(12);
        for i in 0..6 {
            let (a, b) = (x.get(i, 0), x.get(i, 1));
            data.push(a * c + b * s);
            data.push(-a * s + b * c);
        }
        Mat::new(6, 2, data).unwrap()
    };
    let reflected = {
        let mut data = Vec::with_capacity(12);
        for i in 0..6 {
            data.push(x.get(i, 1));
            data.push(x.get(i, 0));
        }
        Mat::new(6, 2, data).unwrap()
    };
    for other in [&rotated, &reflected] {
        let analytic = procrustes_distance(&x, other).unwrap();
        let brute = brute_force_procrustes_2d(&x, other);
        assert!(analytic < 1e-6, "analytic {analytic}");
        assert!(brute < 1e-5, "grid {brute}");
    }
}

/// `tr(K·H·L·H)/(n−1)²` with explicit kernel matrices and double centering.
fn hsic(k: &[Vec<f64>], l: &[Vec<f64>]) -> f64 {
    let n = k.len();
    // Double-center K: kc = H·K·H elementwise.
    let grand = k.iter().flatten().sum::<f64>() / (n * n) as f64;
    let row_means: Vec<f64> = k.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
    let col_means: Vec<f64> = (0..n)
        .map(|j| k.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let mut trace = 0.0;
    for i in 0..n {
        for j in 0..n {
            let kc = k[i][j] - row_means[i] - col_means[j] + grand;
            trace += kc * l[j][i];
        }
    }
    trace / ((n - 1) * (n - 1)) as f64
}

fn linear_kernel(m: &Mat) -> Vec<Vec<f64>> {
    let n = m.rows();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| m.row(i).iter().zip(m.row(j)).map(|(&a, &b)| a * b).sum())
                .collect()
        })
        .collect()
}

#[test]
fn linear_cka_matches_hsic_kernel_ratio() {
    for seed in 0..6u64 {
        // Feature dimensions intentionally differ.
        let x = uniform_mat(12, 5, 500 + seed);
        let y = uniform_mat(12, 7, 600 + seed);
        let feature_route = linear_cka(&x, &y).unwrap();
        let k = linear_kernel(&x);
        let l = linear_kernel(&y);
        let kernel_route = hsic(&k, &l) / (hsic(&k, &k) * hsic(&l, &l)).sqrt();
        assert!(
            (feature_route - kernel_route).abs() < 1e-10,
            "seed {seed}: features {feature_route} vs kernels {kernel_route}"
        );
    }
}

#[test]
fn independent_gaussian_clouds_saturate_procrustes() {
    // Wide independent clouds: the optimal rotation buys almost nothing, so
    // the distance pushes up against its √2 ceiling.
    let ceiling = 2f64.sqrt();
    for seed in 0..3u64 {
        let x = gaussian_mat(512, 4, 7000 + seed);
        let y = gaussian_mat(512, 4, 8000 + seed);
        let d = procrustes_distance(&x, &y).unwrap();
        assert!(d > 1.35, "seed {seed}: narrow cloud distance {d}");
        assert!(d <= ceiling + 1e-12);

        let x8 = gaussian_mat(512, 8, 9000 + seed);
        let y8 = gaussian_mat(512, 8, 9500 + seed);
        let d8 = procrustes_distance(&x8, &y8).unwrap();
        assert!(d8 > 1.3, "seed {seed}: wider cloud distance {d8}");
        assert!(d8 <= ceiling + 1e-12);
    }
}

#[test]
fn independent_clouds_decorrelate_cka_and_rsa() {
    let x = gaussian_mat(512, 6, 1234);
    let y = gaussian_mat(512, 6, 4321);
    // CKA of independent data concentrates near zero…
    assert!(linear_cka(&x, &y).unwrap() < 0.05);
    assert!(cka_distance(&x, &y).unwrap() > 0.95);
    // …and RSA (1 − rank correlation of dissimilarity structures) near one.
    let rsa = rsa_distance(&x, &y).unwrap();
    assert!((0.8..1.2).contains(&rsa), "rsa {rsa}");
}
