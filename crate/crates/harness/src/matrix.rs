//! Execution: the shared pretraining stage (with an on-disk cache), the
//! deterministic training loop, the run matrix over
//! (model × objective × condition × seed), and the probe-swap check.
//!
//! Determinism contract: every random stream is seeded from stable content
//! (names, spec fields, seeds) via [`mix`], never from global state, so a
//! rerun of any cell — serial or parallel, alone or inside the full
//! matrix — reproduces its record byte for byte (wall time aside).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use plab_core::capture::{capture_activations, profiles_from_activations};
use plab_core::metrics::{Mat, MetricError, MetricKind};
use plab_core::models::{Model, ModelConfig};
use plab_core::objectives::{
    prepare_batch, ObjectiveConfig, ObjectiveError, ObjectiveKind, PreparedBatch,
};
use plab_core::stats::spearman;
use plab_core::trainer::{Condition, StepRecord, TrainConfig, TrainError, Trainer};

use crate::config::{CorpusSpec, ExperimentSpec, NamedModel, PretrainSpec};
use crate::corpus::{Corpus, ProbeSet};
use crate::records::{
    CellFailure, CellKey, LossSummary, MetricSlope, PretrainBrief, RunRecord, RECORD_VERSION,
};
use crate::HarnessError;

/// Derives a 64-bit seed from a purpose label and string parts. Content-
/// addressed seeding keeps every stream independent of execution order.
pub fn mix(label: &str, parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(label.as_bytes());
    for part in parts {
        hasher.update([0u8]);
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is long enough"))
}

/// Builds the corpus a spec asks for.
pub fn materialize_corpus(spec: &CorpusSpec) -> Result<Corpus, HarnessError> {
    match spec {
        CorpusSpec::ZipfSynthetic {
            sequences,
            seq_len,
            alphabet,
            exponent,
            seed,
        } => Corpus::generate_zipf(*sequences, *seq_len, *alphabet, *exponent, *seed),
        CorpusSpec::ByteText { path, seq_len } => {
            Corpus::from_bytes(&fs::read(path)?, *seq_len)
        }
        CorpusSpec::TokenFile { path } => Corpus::load(path),
    }
}

/// Identifies a pretrained base model by everything that determines its
/// weights; the model's display name deliberately plays no part.
fn pretrain_key(
    config: &ModelConfig,
    pretrain: &PretrainSpec,
    corpus_hash: &str,
    seed: u64,
) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(config).expect("config serializes"));
    hasher.update(serde_json::to_vec(pretrain).expect("pretrain spec serializes"));
    hasher.update(corpus_hash.as_bytes());
    hasher.update(seed.to_le_bytes());
    hex::encode(&hasher.finalize()[..8])
}

/// Sidecar stored next to a cached pretrained model.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct PretrainSummary {
    key: String,
    corpus_hash: String,
    seed: u64,
    brief: PretrainBrief,
}

/// A deterministic training run's outputs.
pub struct TrainOutcome {
    pub model: Model,
    pub steps: Vec<StepRecord>,
    /// Set when training aborted on divergence; `steps` then holds the
    /// trace up to the abort.
    pub diverged: Option<String>,
}

/// Cycles through corpus rows in seeded shuffled order, reshuffling at each
/// epoch boundary.
struct IndexStream {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl IndexStream {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n, // force a shuffle before the first draw
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn next(&mut self) -> usize {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let index = self.order[self.pos];
        self.pos += 1;
        index
    }
}

/// How many times a masking objective may come up empty-handed on one
/// micro-batch before the run gives up.
const PREPARE_RETRIES: usize = 64;

fn prepare_with_retry(
    kind: ObjectiveKind,
    rows: &[Vec<usize>],
    model: &ModelConfig,
    cfg: &ObjectiveConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PreparedBatch, HarnessError> {
    let mut last = None;
    for _ in 0..PREPARE_RETRIES {
        match prepare_batch(kind, rows, model, cfg, rng) {
            Err(ObjectiveError::NothingSelected) => last = Some(ObjectiveError::NothingSelected),
            other => return Ok(other?),
        }
    }
    Err(last.expect("loop ran at least once").into())
}

/// Runs `steps` optimizer steps of one objective over the corpus rows,
/// deterministically in `seed`. Rows longer than the model's context are
/// clipped; batches cycle the corpus in seeded shuffled order.
#[allow(clippy::too_many_arguments)]
pub fn train_run(
    model: Model,
    objective: ObjectiveKind,
    train_cfg: TrainConfig,
    rows: &[Vec<usize>],
    obj_cfg: &ObjectiveConfig,
    steps: usize,
    batch_rows: usize,
    accumulation: usize,
    seed: u64,
) -> Result<TrainOutcome, HarnessError> {
    if steps == 0 || batch_rows == 0 || accumulation == 0 || batch_rows % accumulation != 0 {
        return Err(HarnessError::BadConfig(format!(
            "train run needs positive steps/batch_rows and accumulation dividing batch_rows; \
             got steps {steps}, batch_rows {batch_rows}, accumulation {accumulation}"
        )));
    }
    if rows.is_empty() {
        return Err(HarnessError::EmptyCorpus);
    }
    let max_len = model.config().max_seq_len;
    let clipped: Vec<Vec<usize>> = rows
        .iter()
        .map(|row| row[..row.len().min(max_len)].to_vec())
        .collect();
    let micro_rows = batch_rows / accumulation;

    let seed_str = seed.to_string();
    let mut order = IndexStream::new(clipped.len(), mix("order", &[&seed_str]));
    let mut corrupt = ChaCha8Rng::seed_from_u64(mix("corrupt", &[&seed_str]));
    let dropout_base = mix("dropout", &[&seed_str]);

    let model_cfg = model.config().clone();
    let mut trainer = Trainer::new(model, train_cfg)?;
    let mut records = Vec::with_capacity(steps);

    for step in 0..steps {
        let mut micros = Vec::with_capacity(accumulation);
        for _ in 0..accumulation {
            let batch: Vec<Vec<usize>> = (0..micro_rows)
                .map(|_| clipped[order.next()].clone())
                .collect();
            micros.push(prepare_with_retry(
                objective,
                &batch,
                &model_cfg,
                obj_cfg,
                &mut corrupt,
            )?);
        }
        // The trainer offsets this by the micro-batch index, so spacing the
        // base by `accumulation` keeps every dropout mask globally distinct.
        let dropout_seed = dropout_base.wrapping_add((step * accumulation) as u64);
        match trainer.step(&micros, Some(dropout_seed)) {
            Ok(record) => records.push(record),
            Err(err @ TrainError::Diverged { .. }) => {
                return Ok(TrainOutcome {
                    model: trainer.into_model(),
                    steps: records,
                    diverged: Some(err.to_string()),
                });
            }
            Err(other) => return Err(other.into()),
        }
    }

    Ok(TrainOutcome {
        model: trainer.into_model(),
        steps: records,
        diverged: None,
    })
}

/// Pretrains one base model, or loads it from the cache directory when the
/// same (architecture, stage, corpus, seed) combination already ran.
pub fn pretrain_cached(
    named: &NamedModel,
    pretrain: &PretrainSpec,
    obj_cfg: &ObjectiveConfig,
    train_rows: &[Vec<usize>],
    corpus_hash: &str,
    seed: u64,
    cache_dir: &Path,
) -> Result<(Model, PretrainBrief), HarnessError> {
    let key = pretrain_key(&named.config, pretrain, corpus_hash, seed);
    let dir = cache_dir.join(format!("{}-{}", named.name, key));
    let summary_path = dir.join("pretrain.json");

    if summary_path.is_file() {
        let summary: PretrainSummary = serde_json::from_str(&fs::read_to_string(&summary_path)?)?;
        if summary.key == key {
            let model = Model::load(&dir)?;
            return Ok((model, summary.brief));
        }
    }

    // Weights depend on the seed alone, so equal configurations start equal
    // regardless of display name.
    let model = Model::new(named.config.clone(), mix("model-init", &[&seed.to_string()]))?;
    let train_cfg = TrainConfig {
        optimizer: pretrain.optimizer,
        condition: Condition::Uniform,
        ..TrainConfig::new(Condition::Uniform)
    };
    let outcome = train_run(
        model,
        pretrain.objective,
        train_cfg,
        train_rows,
        obj_cfg,
        pretrain.steps,
        pretrain.batch_rows,
        pretrain.accumulation,
        mix("pretrain", &[&key]),
    )?;
    if let Some(reason) = outcome.diverged {
        return Err(HarnessError::PretrainFailed {
            model: named.name.clone(),
            seed,
            reason,
        });
    }

    let brief = PretrainBrief {
        objective: pretrain.objective,
        steps: outcome.steps.len(),
        initial_loss: outcome.steps.first().map_or(f64::NAN, |r| r.loss),
        final_loss: outcome.steps.last().map_or(f64::NAN, |r| r.loss),
    };
    outcome.model.save(&dir)?;
    let summary = PretrainSummary {
        key,
        corpus_hash: corpus_hash.to_string(),
        seed,
        brief: brief.clone(),
    };
    fs::write(
        &summary_path,
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    Ok((outcome.model, brief))
}

/// Restricts a matrix run to a subset of cells.
#[derive(Debug, Clone, Default)]
pub struct CellFilter {
    pub model: Option<String>,
    pub objective: Option<ObjectiveKind>,
    pub condition: Option<Condition>,
    pub seeds: Option<Vec<u64>>,
}

impl CellFilter {
    /// Parses a `MODEL:OBJECTIVE:CONDITION` selector; `*` leaves a part
    /// unconstrained.
    pub fn parse(selector: &str) -> Result<Self, HarnessError> {
        let parts: Vec<&str> = selector.split(':').collect();
        let [model, objective, condition] = parts.as_slice() else {
            return Err(HarnessError::BadCell(selector.to_string()));
        };
        let objective = match *objective {
            "*" => None,
            name => Some(
                ObjectiveKind::parse(name)
                    .ok_or_else(|| HarnessError::BadCell(selector.to_string()))?,
            ),
        };
        let condition = match *condition {
            "*" => None,
            name => Some(
                Condition::parse(name)
                    .ok_or_else(|| HarnessError::BadCell(selector.to_string()))?,
            ),
        };
        Ok(Self {
            model: (*model != "*").then(|| model.to_string()),
            objective,
            condition,
            seeds: None,
        })
    }

    pub fn matches(&self, cell: &CellKey) -> bool {
        self.model.as_deref().map_or(true, |m| m == cell.model)
            && self.objective.map_or(true, |o| o == cell.objective)
            && self.condition.map_or(true, |c| c == cell.condition)
            && self
                .seeds
                .as_ref()
                .map_or(true, |s| s.contains(&cell.seed))
    }
}

/// Everything a matrix run produced, in cell-enumeration order.
pub struct MatrixOutcome {
    pub records: Vec<RunRecord>,
    pub failures: Vec<CellFailure>,
}

/// A pretrained base with its frozen pre-fine-tuning captures.
struct PreparedBase {
    model: Model,
    brief: PretrainBrief,
    before: Vec<(f64, Mat)>,
    probe_rows: Vec<Vec<usize>>,
}

/// Enumerates the cells of a spec in canonical order, after filtering.
pub fn enumerate_cells(spec: &ExperimentSpec, filter: &CellFilter) -> Vec<CellKey> {
    let mut cells = Vec::new();
    for model in &spec.models {
        for &objective in &spec.objectives {
            for &condition in &spec.conditions {
                for &seed in &spec.seeds {
                    let cell = CellKey {
                        model: model.name.clone(),
                        objective,
                        condition,
                        seed,
                    };
                    if filter.matches(&cell) {
                        cells.push(cell);
                    }
                }
            }
        }
    }
    cells
}

/// Runs the full (filtered) matrix: materialize the corpus, split out the
/// probe set, pretrain each (model, seed) base once, then fine-tune and
/// profile every cell — in parallel across `jobs` workers when `jobs > 1`
/// (0 lets the runtime pick). A failing cell is recorded and skipped; the
/// rest of the matrix continues.
pub fn run_matrix(
    spec: &ExperimentSpec,
    out_dir: &Path,
    jobs: usize,
    filter: &CellFilter,
) -> Result<MatrixOutcome, HarnessError> {
    spec.validate()?;
    fs::create_dir_all(out_dir)?;

    let cells = enumerate_cells(spec, filter);
    if cells.is_empty() {
        return Err(HarnessError::EmptySelection);
    }

    let corpus = materialize_corpus(&spec.corpus)?;
    let corpus_hash = corpus.content_hash();
    corpus.save(&out_dir.join("corpus.txt"))?;
    let (train, probes) = corpus.split_probes(spec.probe_count, spec.probe_seed)?;
    probes.save(&out_dir.join("probes.txt"))?;
    spec.save(&out_dir.join("experiment.json"))?;

    let spec_hash = spec.hash();
    let causal = spec.pretrain.objective.is_causal();
    let cache_dir = out_dir.join("pretrained");

    // One pretraining pass per distinct (model, seed); failures here fan out
    // to every cell that would have used the base.
    let mut bases: BTreeMap<(String, u64), PreparedBase> = BTreeMap::new();
    let mut failures: Vec<CellFailure> = Vec::new();
    let mut dead: Vec<(String, u64)> = Vec::new();
    let mut pairs: Vec<(String, u64)> = cells
        .iter()
        .map(|c| (c.model.clone(), c.seed))
        .collect();
    pairs.sort();
    pairs.dedup();
    for (name, seed) in pairs {
        let named = spec
            .models
            .iter()
            .find(|m| m.name == name)
            .expect("cells come from the spec's model list");
        let prepared = pretrain_cached(
            named,
            &spec.pretrain,
            &spec.objective,
            &train.rows,
            &corpus_hash,
            seed,
            &cache_dir,
        )
        .and_then(|(model, brief)| {
            let probe_rows = probes.truncated(named.config.max_seq_len);
            let before = capture_activations(&model, &probe_rows, &spec.depths, causal)?;
            Ok(PreparedBase {
                model,
                brief,
                before,
                probe_rows,
            })
        });
        match prepared {
            Ok(base) => {
                bases.insert((name, seed), base);
            }
            Err(err) => {
                let message = err.to_string();
                for cell in cells
                    .iter()
                    .filter(|c| c.model == name && c.seed == seed)
                {
                    failures.push(CellFailure {
                        cell: cell.clone(),
                        error: message.clone(),
                        losses: Vec::new(),
                    });
                }
                dead.push((name, seed));
            }
        }
    }

    let live: Vec<&CellKey> = cells
        .iter()
        .filter(|c| !dead.contains(&(c.model.clone(), c.seed)))
        .collect();

    let run_one = |cell: &CellKey| -> Result<RunRecord, CellFailure> {
        let base = &bases[&(cell.model.clone(), cell.seed)];
        run_cell(spec, &spec_hash, cell, base, &train.rows, &probes.hash, causal)
    };
    let results: Vec<Result<RunRecord, CellFailure>> = if jobs == 1 {
        live.iter().map(|c| run_one(c)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| HarnessError::BadConfig(format!("worker pool: {e}")))?;
        pool.install(|| live.par_iter().map(|c| run_one(c)).collect())
    };

    let mut records = Vec::new();
    let records_dir = out_dir.join("records");
    for result in results {
        match result {
            Ok(record) => {
                record.save(&records_dir.join(format!("{}.json", record.cell.file_stem())))?;
                records.push(record);
            }
            Err(failure) => failures.push(failure),
        }
    }
    for failure in &failures {
        failure.save(&records_dir.join(format!("{}.failed.json", failure.cell.file_stem())))?;
    }

    Ok(MatrixOutcome { records, failures })
}

/// Fine-tunes and profiles one cell against its prepared base.
fn run_cell(
    spec: &ExperimentSpec,
    spec_hash: &str,
    cell: &CellKey,
    base: &PreparedBase,
    train_rows: &[Vec<usize>],
    probe_hash: &str,
    causal: bool,
) -> Result<RunRecord, CellFailure> {
    let started = Instant::now();
    let fail = |error: String, losses: Vec<f64>| CellFailure {
        cell: cell.clone(),
        error,
        losses,
    };

    let run_seed = mix(
        "cell",
        &[
            &cell.model,
            cell.objective.name(),
            cell.condition.name(),
            &cell.seed.to_string(),
        ],
    );
    let outcome = train_run(
        base.model.clone(),
        cell.objective,
        spec.finetune.train_config(cell.condition),
        train_rows,
        &spec.objective,
        spec.finetune.steps,
        spec.finetune.batch_rows,
        spec.finetune.accumulation,
        run_seed,
    )
    .map_err(|e| fail(e.to_string(), Vec::new()))?;

    let losses: Vec<f64> = outcome.steps.iter().map(|r| r.loss).collect();
    if let Some(reason) = outcome.diverged {
        return Err(fail(reason, losses));
    }

    let build = || -> Result<RunRecord, HarnessError> {
        let after = capture_activations(&outcome.model, &base.probe_rows, &spec.depths, causal)?;
        let profiles = profiles_from_activations(&base.before, &after)?;
        let slopes = profiles
            .iter()
            .map(|p| {
                Ok(MetricSlope {
                    metric: p.metric,
                    fit: p.slope()?,
                })
            })
            .collect::<Result<Vec<_>, HarnessError>>()?;

        let cka = profiles
            .iter()
            .find(|p| p.metric == MetricKind::Cka)
            .expect("all metrics are profiled");
        let normalized_cka = match cka.normalized() {
            Ok(fractions) => Some(fractions),
            Err(MetricError::ZeroProfile) => None,
            Err(e) => return Err(e.into()),
        };
        let final_fraction_cka = normalized_cka.as_ref().map(|f| *f.last().expect("non-empty"));

        let trust_ratio_trace = if cell.condition == Condition::EqualStep {
            outcome.steps.iter().map(|r| r.group_ratios.clone()).collect()
        } else {
            Vec::new()
        };
        let direction_cos_min = outcome
            .steps
            .iter()
            .map(|r| r.direction_cos_min)
            .fold(f64::INFINITY, f64::min);

        Ok(RunRecord {
            version: RECORD_VERSION.to_string(),
            spec_hash: spec_hash.to_string(),
            cell: cell.clone(),
            probe_hash: probe_hash.to_string(),
            pretrain: base.brief.clone(),
            depths: spec.depths.clone(),
            loss_summary: LossSummary::from_trace(&losses).expect("steps are positive"),
            losses: losses.clone(),
            profiles,
            slopes,
            normalized_cka,
            final_fraction_cka,
            trust_ratio_trace,
            direction_cos_min,
            wall_time_s: 0.0,
        })
    };

    match build() {
        Ok(mut record) => {
            record.wall_time_s = started.elapsed().as_secs_f64();
            Ok(record)
        }
        Err(e) => Err(fail(e.to_string(), losses)),
    }
}

/// Robustness check: fine-tuned models for at least three objectives are
/// re-profiled on two probe sets; returns the rank correlation between the
/// two slope orderings for the given metric. High correlation means the
/// objective ordering is a property of the models, not of the probes.
#[allow(clippy::too_many_arguments)]
pub fn second_probe_check(
    base: &Model,
    tuned: &[(ObjectiveKind, Model)],
    probes_a: &ProbeSet,
    probes_b: &ProbeSet,
    depths: &[f64],
    causal: bool,
    metric: MetricKind,
) -> Result<f64, HarnessError> {
    if tuned.len() < 3 {
        return Err(HarnessError::TooFewObjectives {
            need: 3,
            got: tuned.len(),
        });
    }
    let max_len = base.config().max_seq_len;
    let mut orderings = Vec::with_capacity(2);
    for probes in [probes_a, probes_b] {
        let rows = probes.truncated(max_len);
        let before = capture_activations(base, &rows, depths, causal)?;
        let mut slopes = Vec::with_capacity(tuned.len());
        for (_, model) in tuned {
            let after = capture_activations(model, &rows, depths, causal)?;
            let profiles = profiles_from_activations(&before, &after)?;
            let profile = profiles
                .iter()
                .find(|p| p.metric == metric)
                .expect("all metrics are profiled");
            slopes.push(profile.slope()?.slope);
        }
        orderings.push(slopes);
    }
    Ok(spearman(&orderings[0], &orderings[1])?)
}
