//! Corpus behavior: deterministic generation, the on-disk format, the
//! power-law shape of the synthetic corpus, and the probe split.

use proptest::prelude::*;
use tempfile::tempdir;

use plab_harness::corpus::Corpus;

#[test]
fn regenerating_a_corpus_writes_identical_bytes() {
    let a = Corpus::generate_zipf(300, 24, 120, 1.1, 42).unwrap();
    let b = Corpus::generate_zipf(300, 24, 120, 1.1, 42).unwrap();
    assert_eq!(a.to_file_string(), b.to_file_string());
    assert_eq!(a.content_hash(), b.content_hash());

    let dir = tempdir().unwrap();
    let path_a = dir.path().join("a.txt");
    let path_b = dir.path().join("b.txt");
    a.save(&path_a).unwrap();
    b.save(&path_b).unwrap();
    assert_eq!(
        std::fs::read(&path_a).unwrap(),
        std::fs::read(&path_b).unwrap()
    );
}

#[test]
fn byte_tokenization_stays_under_256() {
    let text: Vec<u8> = (0..=255u8).cycle().take(4_096).collect();
    let corpus = Corpus::from_bytes(&text, 32).unwrap();
    assert!(corpus.max_token() < 256);
    assert_eq!(corpus.rows.len(), 128);
    assert!(corpus.rows.iter().all(|row| row.len() == 32));
}

#[test]
fn zipf_head_follows_the_configured_exponent() {
    // 4,000 rows of 32 tokens give the head ranks enough mass for a clean
    // log-log fit; the tail is excluded by the min-count threshold.
    let corpus = Corpus::generate_zipf(4_000, 32, 250, 1.1, 7).unwrap();
    let slope = corpus.rank_frequency_slope(50, 30).unwrap();
    assert!(
        (slope - (-1.1)).abs() < 0.1,
        "rank-frequency slope {slope} should be within 0.1 of -1.1"
    );
}

#[test]
fn probe_split_holds_out_exactly_the_requested_rows() {
    let corpus = Corpus::generate_zipf(500, 16, 80, 1.2, 3).unwrap();
    let (train, probes) = corpus.split_probes(290, 13).unwrap();
    assert_eq!(probes.rows.len(), 290);
    assert_eq!(train.rows.len(), 210);
    assert_eq!(probes.hash.len(), 64);

    // The split is a partition: no probe row index is reachable from the
    // training side once multiplicities are respected.
    let mut recombined = train.rows.clone();
    recombined.extend(probes.rows.clone());
    recombined.sort();
    let mut original = corpus.rows.clone();
    original.sort();
    assert_eq!(recombined, original);
}

#[test]
fn corpus_files_reject_junk_with_line_numbers() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("bad.txt");
    std::fs::write(&path, "1 2 3\n4 x 6\n").unwrap();
    let err = Corpus::load(&path).unwrap_err();
    let message = err.to_string();
    assert!(message.contains("line 2"), "{message}");
    assert!(message.contains('x'), "{message}");
}

proptest! {
    #[test]
    fn save_then_load_is_lossless(
        rows in prop::collection::vec(
            prop::collection::vec(0usize..1_000, 2..20),
            1..30,
        )
    ) {
        let corpus = Corpus::new(rows).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.txt");
        corpus.save(&path).unwrap();
        let back = Corpus::load(&path).unwrap();
        prop_assert_eq!(&corpus, &back);
        prop_assert_eq!(corpus.content_hash(), back.content_hash());
    }

    #[test]
    fn content_hash_detects_any_single_token_change(
        rows in prop::collection::vec(
            prop::collection::vec(0usize..100, 2..8),
            1..6,
        ),
        row_pick: prop::sample::Index,
        col_pick: prop::sample::Index,
    ) {
        let corpus = Corpus::new(rows.clone()).unwrap();
        let mut changed = rows;
        let r = row_pick.index(changed.len());
        let c = col_pick.index(changed[r].len());
        changed[r][c] += 1_000; // outside the original token range
        let other = Corpus::new(changed).unwrap();
        prop_assert_ne!(corpus.content_hash(), other.content_hash());
    }
}
