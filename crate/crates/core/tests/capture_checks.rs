//! Checks for probe capture and before/after depth profiles: identity runs
//! are flat, padding and batching cannot leak across rows, and a
//! perturbation confined to one block moves only the depths at or past it.

use plab_core::capture::{capture_activations, profile_between, CaptureError};
use plab_core::metrics::MetricKind;
use plab_core::models::{Model, ModelConfig, SpecialTokens};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 64,
        max_seq_len: 16,
        d_model: 32,
        n_layers: 4,
        n_heads: 4,
        d_ff: 64,
        dropout: 0.1, // capture must disable it regardless
        ..ModelConfig::default()
    }
}

fn random_probes(n: usize, len: usize, vocab: usize, seed: u64) -> Vec<Vec<usize>> {
    let limit = SpecialTokens::content_limit(vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..len).map(|_| rng.gen_range(0..limit)).collect())
        .collect()
}

#[test]
fn identical_models_give_an_all_zero_profile_under_every_metric() {
    let model = Model::new(small_config(), 11).unwrap();
    let probes = random_probes(10, 12, 64, 1);
    let depths = [0.25, 0.5, 0.75, 1.0];
    let profiles = profile_between(&model, &model, &probes, &depths, false).unwrap();

    let kinds: Vec<MetricKind> = profiles.iter().map(|p| p.metric).collect();
    assert_eq!(kinds, MetricKind::ALL.to_vec());
    for profile in &profiles {
        assert_eq!(profile.points.len(), depths.len());
        for &(depth, delta) in &profile.points {
            assert!(
                delta.abs() < 1e-12,
                "{:?} at depth {depth} drifted {delta} on identical weights",
                profile.metric
            );
        }
    }
}

/// Targeted-perturbation oracle: noise added only to the last block's MLP
/// output projection cannot reach captures taken after earlier blocks, and
/// must visibly move the final capture.
#[test]
fn perturbing_the_last_block_moves_only_the_deepest_point() {
    let before = Model::new(small_config(), 12).unwrap();
    let mut after = before.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    {
        let w2 = after.param_mut("layers.3.mlp.w2").unwrap();
        for v in w2.data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    let probes = random_probes(12, 12, 64, 2);
    // Depths resolving to blocks 1, 2, 3, and the final-norm output.
    let depths = [0.25, 0.5, 0.75, 1.0];
    let profiles = profile_between(&before, &after, &probes, &depths, false).unwrap();

    for profile in &profiles {
        for &(depth, delta) in &profile.points[..3] {
            assert!(
                delta.abs() < 1e-12,
                "{:?} at depth {depth} moved ({delta}) though its blocks are untouched",
                profile.metric
            );
        }
    }
    let deepest = |kind: MetricKind| {
        profiles
            .iter()
            .find(|p| p.metric == kind)
            .unwrap()
            .points
            .last()
            .unwrap()
            .1
    };
    assert!(deepest(MetricKind::Procrustes) > 1e-4);
    assert!(deepest(MetricKind::Cka) > 1e-8);
    assert!(deepest(MetricKind::Rsa) >= 0.0);
}

/// Row isolation: a probe's pooled activation must not depend on which other
/// rows share its batch, nor on padding introduced by longer neighbours.
#[test]
fn pooled_rows_are_independent_of_batch_company_and_padding() {
    let model = Model::new(small_config(), 13).unwrap();
    let mut probes = random_probes(40, 12, 64, 3);
    // Make lengths ragged so batching forces padding.
    for (i, row) in probes.iter_mut().enumerate() {
        row.truncate(6 + (i % 7));
    }
    let depths = [0.5, 1.0];
    let full = capture_activations(&model, &probes, &depths, true).unwrap();

    for &row_index in &[0usize, 17, 39] {
        let solo = capture_activations(
            &model,
            std::slice::from_ref(&probes[row_index]),
            &depths,
            true,
        )
        .unwrap();
        for ((_, full_mat), (_, solo_mat)) in full.iter().zip(&solo) {
            for (a, b) in full_mat.row(row_index).iter().zip(solo_mat.row(0)) {
                assert_eq!(a.to_bits(), b.to_bits(), "row {row_index} leaked context");
            }
        }
    }
}

#[test]
fn profile_between_rejects_different_architectures() {
    let a = Model::new(small_config(), 14).unwrap();
    let b = Model::new(
        ModelConfig {
            n_layers: 2,
            ..small_config()
        },
        14,
    )
    .unwrap();
    let probes = random_probes(4, 8, 64, 4);
    assert!(matches!(
        profile_between(&a, &b, &probes, &[0.5, 1.0], false),
        Err(CaptureError::ConfigMismatch)
    ));
}
