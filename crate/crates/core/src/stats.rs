//! Small exact statistics: rank correlation, the two-sided sign test, and
//! mean/std summaries.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("need at least {need} observations, got {got}")]
    TooFew { need: usize, got: usize },

    #[error("input lengths differ: {lhs} vs {rhs}")]
    LengthMismatch { lhs: usize, rhs: usize },

    #[error("non-finite observation at index {index}")]
    NonFinite { index: usize },

    #[error("correlation undefined: a side has zero rank variance")]
    ZeroVariance,

    #[error("successes {k} exceed trials {n}")]
    BadCount { k: usize, n: usize },
}

fn check_finite(xs: &[f64]) -> Result<(), StatsError> {
    match xs.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(StatsError::NonFinite { index }),
        None => Ok(()),
    }
}

/// Mid-ranks (1-based): ties receive the average of the ranks they span.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite values"));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        // positions i..=j (0-based) share the average 1-based rank
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, StatsError> {
    if xs.len() != ys.len() {
        return Err(StatsError::LengthMismatch {
            lhs: xs.len(),
            rhs: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(StatsError::TooFew {
            need: 2,
            got: xs.len(),
        });
    }
    check_finite(xs)?;
    check_finite(ys)?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation: the Pearson correlation of mid-ranks.
/// Ties are averaged; a side whose values are all equal is an error.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, StatsError> {
    if xs.len() != ys.len() {
        return Err(StatsError::LengthMismatch {
            lhs: xs.len(),
            rhs: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(StatsError::TooFew {
            need: 2,
            got: xs.len(),
        });
    }
    check_finite(xs)?;
    check_finite(ys)?;
    pearson(&ranks(xs), &ranks(ys))
}

/// Exact two-sided sign-test p-value for `k` successes in `n` fair-coin
/// trials: `min(1, 2·Σᵢ C(n,i)/2ⁿ)` with the sum running from
/// `max(k, n−k)` to `n`.
pub fn sign_test_pvalue(k: usize, n: usize) -> Result<f64, StatsError> {
    if n == 0 || k > n {
        return Err(StatsError::BadCount { k, n });
    }
    let m = k.max(n - k);
    let mut tail = 0.0;
    for i in m..=n {
        tail += binomial(n, i);
    }
    let p = 2.0 * tail / 2f64.powi(n as i32);
    Ok(p.min(1.0))
}

/// C(n, i) as an exact f64 (exact while the result stays below 2⁵³).
fn binomial(n: usize, i: usize) -> f64 {
    let i = i.min(n - i);
    let mut acc = 1.0;
    for j in 0..i {
        acc = acc * (n - j) as f64 / (j + 1) as f64;
    }
    acc.round()
}

/// Which denominator a standard deviation uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StdKind {
    /// Divide by `n` (the default everywhere in this crate).
    Population,
    /// Divide by `n − 1`.
    Sample,
}

/// A mean ± standard deviation summary of one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

/// Summarizes values as mean ± population standard deviation.
pub fn summarize(values: &[f64]) -> Result<Summary, StatsError> {
    summarize_with(values, StdKind::Population)
}

/// Summarizes values with an explicit choice of std normalization.
pub fn summarize_with(values: &[f64], kind: StdKind) -> Result<Summary, StatsError> {
    let need = match kind {
        StdKind::Population => 1,
        StdKind::Sample => 2,
    };
    if values.len() < need {
        return Err(StatsError::TooFew {
            need,
            got: values.len(),
        });
    }
    check_finite(values)?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|&v| (v - mean) * (v - mean)).sum();
    let denom = match kind {
        StdKind::Population => n,
        StdKind::Sample => n - 1.0,
    };
    Ok(Summary {
        n: values.len(),
        mean,
        std: (ss / denom).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_perfect_and_reversed() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let up = [10.0, 20.0, 30.0, 40.0];
        let down = [4.0, 3.0, 2.0, 1.0];
        assert!((spearman(&xs, &up).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&xs, &down).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn spearman_averages_tied_ranks() {
        // ranks of xs: [1, 2.5, 2.5, 4]
        let xs = [1.0, 2.0, 2.0, 3.0];
        let ys = [1.0, 2.0, 3.0, 4.0];
        let rho = spearman(&xs, &ys).unwrap();
        // Pearson([1,2.5,2.5,4],[1,2,3,4]) = 3/√10 · 1/√(45/4)... computed:
        // cov = 7.5/4? direct: means 2.5/2.5; Σdxdy = 4.5, Σdx² = 4.5, Σdy² = 5
        let expect = 4.5 / (4.5f64 * 5.0).sqrt();
        assert!((rho - expect).abs() < 1e-12);
    }

    #[test]
    fn spearman_rejects_degenerate_input() {
        assert_eq!(
            spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap_err(),
            StatsError::ZeroVariance
        );
        assert!(matches!(
            spearman(&[1.0], &[2.0]).unwrap_err(),
            StatsError::TooFew { .. }
        ));
        assert!(matches!(
            spearman(&[1.0, f64::NAN], &[1.0, 2.0]).unwrap_err(),
            StatsError::NonFinite { index: 1 }
        ));
    }

    #[test]
    fn sign_test_known_values() {
        assert_eq!(sign_test_pvalue(8, 9).unwrap(), 0.0390625);
        assert_eq!(sign_test_pvalue(9, 9).unwrap(), 0.00390625);
        assert_eq!(sign_test_pvalue(0, 1).unwrap(), 1.0);
        // symmetry: k and n−k are equally extreme
        assert_eq!(
            sign_test_pvalue(1, 9).unwrap(),
            sign_test_pvalue(8, 9).unwrap()
        );
    }

    #[test]
    fn sign_test_rejects_bad_counts() {
        assert!(sign_test_pvalue(3, 2).is_err());
        assert!(sign_test_pvalue(0, 0).is_err());
    }

    /// Independent oracle: enumerate all 2ⁿ outcome counts and measure the
    /// probability of an outcome at least as extreme (two-sided) as `k`.
    fn sign_test_by_enumeration(k: usize, n: usize) -> f64 {
        let m = k.max(n - k);
        let mut extreme = 0u64;
        for i in 0..=n {
            if i.max(n - i) >= m {
                extreme += binomial(n, i) as u64;
            }
        }
        extreme as f64 / 2f64.powi(n as i32)
    }

    #[test]
    fn sign_test_matches_enumeration_for_all_small_cases() {
        for n in 1..=12 {
            for k in 0..=n {
                let formula = sign_test_pvalue(k, n).unwrap();
                let enumerated = sign_test_by_enumeration(k, n);
                assert!(
                    (formula - enumerated).abs() < 1e-15,
                    "k={k} n={n}: {formula} vs {enumerated}"
                );
            }
        }
    }

    #[test]
    fn summaries_use_population_std_by_default() {
        let s = summarize(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (1.25f64).sqrt()).abs() < 1e-15);
        let s2 = summarize_with(&[1.0, 2.0, 3.0, 4.0], StdKind::Sample).unwrap();
        assert!((s2.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn summary_edge_cases() {
        assert!(summarize(&[]).is_err());
        let single = summarize(&[7.0]).unwrap();
        assert_eq!((single.mean, single.std), (7.0, 0.0));
        assert!(summarize_with(&[7.0], StdKind::Sample).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            /// Rank correlation is invariant under strictly increasing maps.
            #[test]
            fn spearman_monotone_invariant(xs in prop::collection::vec(-100.0f64..100.0, 3..20)) {
                // keep the map's monotonicity visible to f64: require separation
                let mut sorted = xs.clone();
                sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                prop_assume!(sorted.windows(2).all(|w| w[1] - w[0] > 1e-6));
                let ys: Vec<f64> = xs.iter().map(|&x| 5.0 * x + x.atan()).collect();
                let rho = spearman(&xs, &ys).unwrap();
                prop_assert!((rho - 1.0).abs() < 1e-9);
            }

            #[test]
            fn spearman_bounded(
                xs in prop::collection::vec(-100.0f64..100.0, 3..20),
                ys in prop::collection::vec(-100.0f64..100.0, 20)
            ) {
                let ys = &ys[..xs.len()];
                if let Ok(rho) = spearman(&xs, ys) {
                    prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&rho));
                }
            }

            #[test]
            fn sign_test_valid_probability(n in 1usize..=30, frac in 0.0f64..=1.0) {
                let k = ((n as f64) * frac).round() as usize;
                let p = sign_test_pvalue(k.min(n), n).unwrap();
                prop_assert!(p > 0.0 && p <= 1.0);
                // symmetry
                let q = sign_test_pvalue(n - k.min(n), n).unwrap();
                prop_assert!((p - q).abs() < 1e-15);
            }
        }
    }
}
