//! Experiment harness around the `plab-core` laboratory: corpus and probe
//! management, the pretraining stage, run-matrix execution over
//! (model × objective × condition × seed), persistent run records, and
//! report/plot emission.
//!
//! The layers, bottom to top:
//!
//! * [`corpus`] — deterministic corpus generation (Zipf-synthetic or
//!   byte-tokenized text), the newline-delimited token-id file format, and
//!   the held-out probe split.
//! * [`config`] — the single-JSON [`config::ExperimentSpec`] that fully
//!   determines an experiment, plus its validation and content hash.
//! * [`records`] — the schema-versioned [`records::RunRecord`] artifact (one
//!   per matrix cell) and its canonical, timestamp-free payload.
//! * [`matrix`] — pretraining with an on-disk cache, deterministic
//!   fine-tuning runs, the (optionally parallel) run matrix, and the
//!   probe-swap robustness check.
//! * [`report`] — CSV tables and SVG depth-profile plots derived from run
//!   records.
//! * [`svg`] — the hand-rolled static SVG 1.1 line-plot backend.

use std::path::PathBuf;

use thiserror::Error;

pub mod config;
pub mod corpus;
pub mod matrix;
pub mod records;
pub mod report;
pub mod svg;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration: {0}")]
    BadConfig(String),

    #[error("corpus file {path}, line {line}: {message}")]
    CorpusFormat {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("the corpus has no usable rows")]
    EmptyCorpus,

    #[error("cannot hold out {need} probe rows from a corpus of {have}")]
    ProbeSplit { need: usize, have: usize },

    #[error("rank-frequency fit needs at least {need} well-populated ranks, found {got}")]
    SparseFrequencies { need: usize, got: usize },

    #[error("no run records to work with")]
    NoRecords,

    #[error("bad cell selector '{0}': expected MODEL:OBJECTIVE:CONDITION")]
    BadCell(String),

    #[error("pretraining '{model}' (seed {seed}) failed: {reason}")]
    PretrainFailed {
        model: String,
        seed: u64,
        reason: String,
    },

    #[error("the selection matches no cells of this experiment")]
    EmptySelection,

    #[error("probe-swap check needs at least {need} fine-tuned objectives, got {got}")]
    TooFewObjectives { need: usize, got: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Model(#[from] plab_core::models::ModelError),

    #[error(transparent)]
    Objective(#[from] plab_core::objectives::ObjectiveError),

    #[error(transparent)]
    Train(#[from] plab_core::trainer::TrainError),

    #[error(transparent)]
    Capture(#[from] plab_core::capture::CaptureError),

    #[error(transparent)]
    Metric(#[from] plab_core::metrics::MetricError),

    #[error(transparent)]
    Distance(#[from] plab_core::distances::DistanceError),

    #[error(transparent)]
    Stats(#[from] plab_core::stats::StatsError),
}
