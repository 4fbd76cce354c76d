//! Token corpora: deterministic generation, the on-disk format, and the
//! held-out probe split.
//!
//! A corpus is a list of token-id rows. On disk it is a plain text file,
//! one row per line, token ids as space-separated decimal integers. Every
//! row must hold at least two tokens so that each row is usable by every
//! objective (next-token units, segment pairs, corruption targets).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::distributions::Distribution;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Zipf;
use sha2::{Digest, Sha256};

use plab_core::metrics::fit_line;

use crate::HarnessError;

/// Minimum tokens per row for the row to be usable by all objectives.
pub const MIN_ROW_LEN: usize = 2;

/// A corpus of token-id rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub rows: Vec<Vec<usize>>,
}

/// A frozen set of probe rows, identified by a content hash so that run
/// records can state exactly which probes they were measured on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeSet {
    pub rows: Vec<Vec<usize>>,
    /// SHA-256 hex digest of the serialized rows.
    pub hash: String,
}

impl Corpus {
    pub fn new(rows: Vec<Vec<usize>>) -> Result<Self, HarnessError> {
        if rows.is_empty() {
            return Err(HarnessError::EmptyCorpus);
        }
        if let Some(short) = rows.iter().position(|r| r.len() < MIN_ROW_LEN) {
            return Err(HarnessError::BadConfig(format!(
                "corpus row {short} has {} tokens; every row needs at least {MIN_ROW_LEN}",
                rows[short].len()
            )));
        }
        Ok(Self { rows })
    }

    /// Draw `sequences` rows of `seq_len` tokens from a Zipf distribution
    /// over `alphabet` symbols with the given exponent. Token ids are
    /// zero-based (`0..alphabet`). Fully determined by `seed`.
    pub fn generate_zipf(
        sequences: usize,
        seq_len: usize,
        alphabet: usize,
        exponent: f64,
        seed: u64,
    ) -> Result<Self, HarnessError> {
        if sequences == 0 || seq_len < MIN_ROW_LEN {
            return Err(HarnessError::BadConfig(format!(
                "zipf corpus needs sequences >= 1 and seq_len >= {MIN_ROW_LEN}, \
                 got {sequences} x {seq_len}"
            )));
        }
        if alphabet < 2 {
            return Err(HarnessError::BadConfig(format!(
                "zipf corpus needs an alphabet of at least 2 symbols, got {alphabet}"
            )));
        }
        if !(exponent.is_finite() && exponent > 0.0) {
            return Err(HarnessError::BadConfig(format!(
                "zipf exponent must be finite and positive, got {exponent}"
            )));
        }
        let dist = Zipf::new(alphabet as u64, exponent).map_err(|e| {
            HarnessError::BadConfig(format!("zipf distribution rejected parameters: {e}"))
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..sequences)
            .map(|_| {
                (0..seq_len)
                    // Samples land in 1..=alphabet; shift to zero-based ids.
                    .map(|_| dist.sample(&mut rng) as usize - 1)
                    .collect()
            })
            .collect();
        Self::new(rows)
    }

    /// Tokenize raw text as bytes (ids `0..256`) and chunk it into rows of
    /// `seq_len`. A trailing chunk shorter than two tokens is dropped.
    pub fn from_bytes(text: &[u8], seq_len: usize) -> Result<Self, HarnessError> {
        if seq_len < MIN_ROW_LEN {
            return Err(HarnessError::BadConfig(format!(
                "byte corpus needs seq_len >= {MIN_ROW_LEN}, got {seq_len}"
            )));
        }
        let rows: Vec<Vec<usize>> = text
            .chunks(seq_len)
            .filter(|chunk| chunk.len() >= MIN_ROW_LEN)
            .map(|chunk| chunk.iter().map(|&b| b as usize).collect())
            .collect();
        if rows.is_empty() {
            return Err(HarnessError::EmptyCorpus);
        }
        Self::new(rows)
    }

    /// Serialize to the on-disk line format.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            let mut first = true;
            for &token in row {
                if !first {
                    out.push(' ');
                }
                let _ = write!(out, "{token}");
                first = false;
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path)?;
        let mut rows = Vec::new();
        for (index, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut row = Vec::new();
            for field in line.split_whitespace() {
                let token: usize = field.parse().map_err(|_| HarnessError::CorpusFormat {
                    path: path.to_path_buf(),
                    line: index + 1,
                    message: format!("'{field}' is not a token id"),
                })?;
                row.push(token);
            }
            if row.len() < MIN_ROW_LEN {
                return Err(HarnessError::CorpusFormat {
                    path: path.to_path_buf(),
                    line: index + 1,
                    message: format!(
                        "row has {} tokens; every row needs at least {MIN_ROW_LEN}",
                        row.len()
                    ),
                });
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(HarnessError::EmptyCorpus);
        }
        Self::new(rows)
    }

    /// SHA-256 hex digest of the serialized file bytes.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_file_string().as_bytes()))
    }

    /// Largest token id present, if any row is non-empty.
    pub fn max_token(&self) -> usize {
        self.rows
            .iter()
            .flat_map(|row| row.iter().copied())
            .max()
            .unwrap_or(0)
    }

    /// Hold out `n_probes` rows as a frozen probe set and return the
    /// remaining rows as the training corpus. The pick is a seeded shuffle
    /// of row indices; both halves keep their original corpus order.
    pub fn split_probes(
        &self,
        n_probes: usize,
        seed: u64,
    ) -> Result<(Corpus, ProbeSet), HarnessError> {
        if n_probes == 0 || n_probes >= self.rows.len() {
            return Err(HarnessError::ProbeSplit {
                need: n_probes,
                have: self.rows.len(),
            });
        }
        let mut order: Vec<usize> = (0..self.rows.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let mut probe_idx: Vec<usize> = order[..n_probes].to_vec();
        let mut train_idx: Vec<usize> = order[n_probes..].to_vec();
        probe_idx.sort_unstable();
        train_idx.sort_unstable();
        let probes = ProbeSet::new(
            probe_idx
                .into_iter()
                .map(|i| self.rows[i].clone())
                .collect(),
        )?;
        let train = Corpus::new(
            train_idx
                .into_iter()
                .map(|i| self.rows[i].clone())
                .collect(),
        )?;
        Ok((train, probes))
    }

    /// Slope of `ln frequency` against `ln rank` over the best-populated
    /// head of the rank-frequency table: the `max_ranks` most frequent
    /// tokens, keeping only ranks observed at least `min_count` times. The
    /// sparse tail is excluded because its counts are dominated by
    /// small-sample noise rather than the underlying law.
    pub fn rank_frequency_slope(
        &self,
        max_ranks: usize,
        min_count: usize,
    ) -> Result<f64, HarnessError> {
        let mut counts = std::collections::HashMap::new();
        for row in &self.rows {
            for &token in row {
                *counts.entry(token).or_insert(0usize) += 1;
            }
        }
        let mut freqs: Vec<usize> = counts.into_values().collect();
        freqs.sort_unstable_by(|a, b| b.cmp(a));
        let head: Vec<usize> = freqs
            .into_iter()
            .take(max_ranks)
            .take_while(|&c| c >= min_count)
            .collect();
        if head.len() < 3 {
            return Err(HarnessError::SparseFrequencies {
                need: 3,
                got: head.len(),
            });
        }
        let xs: Vec<f64> = (1..=head.len()).map(|rank| (rank as f64).ln()).collect();
        let ys: Vec<f64> = head.iter().map(|&c| (c as f64).ln()).collect();
        Ok(fit_line(&xs, &ys)?.slope)
    }
}

impl ProbeSet {
    pub fn new(rows: Vec<Vec<usize>>) -> Result<Self, HarnessError> {
        let corpus = Corpus::new(rows)?;
        let hash = corpus.content_hash();
        Ok(Self {
            rows: corpus.rows,
            hash,
        })
    }

    /// Probe rows clipped to a model's maximum sequence length.
    pub fn truncated(&self, max_len: usize) -> Vec<Vec<usize>> {
        self.rows
            .iter()
            .map(|row| row[..row.len().min(max_len)].to_vec())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        Corpus {
            rows: self.rows.clone(),
        }
        .save(path)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let corpus = Corpus::load(path)?;
        Self::new(corpus.rows)
    }
}
