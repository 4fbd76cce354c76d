//! `plab` — the experiment command line: corpus generation, pretraining,
//! the run matrix, profile inspection, objective distances, report
//! emission, and a quick self-test.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use plab_core::distances::{distance_report, DistanceReport, ReportConfig, Schedule};
use plab_core::metrics::MetricKind;
use plab_core::models::ModelConfig;
use plab_core::objectives::ObjectiveKind;
use plab_core::trainer::Condition;

use plab_harness::config::{CorpusSpec, ExperimentSpec, NamedModel};
use plab_harness::corpus::Corpus;
use plab_harness::matrix::{
    materialize_corpus, mix, pretrain_cached, run_matrix, CellFilter,
};
use plab_harness::records::RunRecord;
use plab_harness::report::emit_report;

#[derive(Parser)]
#[command(
    name = "plab",
    about = "Depth-profile experiments: pretrain, fine-tune, measure, report",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Restrict to one seed from the spec's list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the spec's. The PLAB_OUT environment
    /// variable overrides both.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize the corpus and write it to the output directory.
    GenCorpus(CommonArgs),
    /// Pretrain (or load from cache) every base model the matrix needs.
    Pretrain(CommonArgs),
    /// Run the fine-tuning matrix and write one record per cell.
    Run {
        #[command(flatten)]
        common: CommonArgs,
        /// Parallel workers over matrix cells (0 = automatic).
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Restrict to cells matching MODEL:OBJECTIVE:CONDITION
        /// (use * as a wildcard for any part).
        #[arg(long)]
        cell: Option<String>,
    },
    /// Print the depth profiles of the records written so far.
    Profile(CommonArgs),
    /// Compute training-free objective distances on the pretrained models.
    Distance(CommonArgs),
    /// Emit CSV tables and SVG plots from the records.
    Report(CommonArgs),
    /// Run a quick end-to-end self-check (no configuration needed).
    Selftest,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenCorpus(common) => gen_corpus(&common),
        Command::Pretrain(common) => pretrain(&common),
        Command::Run { common, jobs, cell } => run(&common, jobs, cell.as_deref()),
        Command::Profile(common) => profile(&common),
        Command::Distance(common) => distance(&common),
        Command::Report(common) => report(&common),
        Command::Selftest => selftest(),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

/// Loads the spec, applies the seed restriction, and resolves the output
/// directory (PLAB_OUT beats --out beats the spec).
fn load(common: &CommonArgs) -> Result<(ExperimentSpec, PathBuf)> {
    let mut spec = ExperimentSpec::load(&common.config)
        .with_context(|| format!("loading {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        if !spec.seeds.contains(&seed) {
            bail!("--seed {seed} is not in the spec's seed list {:?}", spec.seeds);
        }
        spec.seeds = vec![seed];
    }
    let out = std::env::var_os("PLAB_OUT")
        .map(PathBuf::from)
        .or_else(|| common.out.clone())
        .unwrap_or_else(|| spec.out_dir.clone());
    Ok((spec, out))
}

fn gen_corpus(common: &CommonArgs) -> Result<ExitCode> {
    let (spec, out) = load(common)?;
    let corpus = materialize_corpus(&spec.corpus)?;
    fs::create_dir_all(&out)?;
    let path = out.join("corpus.txt");
    corpus.save(&path)?;
    println!(
        "wrote {} ({} rows, hash {})",
        path.display(),
        corpus.rows.len(),
        corpus.content_hash()
    );
    if matches!(spec.corpus, CorpusSpec::ZipfSynthetic { .. }) {
        match corpus.rank_frequency_slope(50, 30) {
            Ok(slope) => println!("rank-frequency slope over the head ranks: {slope:.4}"),
            Err(err) => println!("rank-frequency slope unavailable: {err}"),
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn pretrain(common: &CommonArgs) -> Result<ExitCode> {
    let (spec, out) = load(common)?;
    spec.validate()?;
    let corpus = materialize_corpus(&spec.corpus)?;
    let corpus_hash = corpus.content_hash();
    let (train, _probes) = corpus.split_probes(spec.probe_count, spec.probe_seed)?;
    let cache = out.join("pretrained");
    for named in &spec.models {
        for &seed in &spec.seeds {
            let (_, brief) = pretrain_cached(
                named,
                &spec.pretrain,
                &spec.objective,
                &train.rows,
                &corpus_hash,
                seed,
                &cache,
            )?;
            println!(
                "{} seed {seed}: {} for {} steps, loss {:.4} -> {:.4}",
                named.name,
                brief.objective.name(),
                brief.steps,
                brief.initial_loss,
                brief.final_loss
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn run(common: &CommonArgs, jobs: usize, cell: Option<&str>) -> Result<ExitCode> {
    let (spec, out) = load(common)?;
    let mut filter = match cell {
        Some(selector) => CellFilter::parse(selector)?,
        None => CellFilter::default(),
    };
    if let Some(seed) = common.seed {
        filter.seeds = Some(vec![seed]);
    }
    let outcome = run_matrix(&spec, &out, jobs, &filter)?;
    for record in &outcome.records {
        let slope = record
            .slope_for(MetricKind::Procrustes)
            .map_or(f64::NAN, |fit| fit.slope);
        println!(
            "ok {} (loss {:.4} -> {:.4}, alignment slope {slope:.5}, {:.1}s)",
            record.cell, record.loss_summary.initial, record.loss_summary.r#final,
            record.wall_time_s
        );
    }
    for failure in &outcome.failures {
        println!("FAILED {}: {}", failure.cell, failure.error);
    }
    println!(
        "{} records, {} failures -> {}",
        outcome.records.len(),
        outcome.failures.len(),
        out.join("records").display()
    );
    if outcome.records.is_empty() {
        bail!("every selected cell failed");
    }
    Ok(ExitCode::SUCCESS)
}

/// Loads every successful record under `out/records`.
fn load_records(out: &Path) -> Result<Vec<RunRecord>> {
    let dir = out.join("records");
    let mut records = Vec::new();
    let entries = fs::read_dir(&dir)
        .with_context(|| format!("no records directory at {}; run `plab run` first", dir.display()))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "json")
                && !p
                    .file_name()
                    .is_some_and(|n| n.to_string_lossy().ends_with(".failed.json"))
        })
        .collect();
    paths.sort();
    for path in paths {
        records.push(RunRecord::load(&path)?);
    }
    Ok(records)
}

fn profile(common: &CommonArgs) -> Result<ExitCode> {
    let (_, out) = load(common)?;
    let records = load_records(&out)?;
    if records.is_empty() {
        bail!("no records under {}", out.join("records").display());
    }
    for record in &records {
        println!(
            "{} (pretrained {} {} steps; fine-tuned {} steps, loss {:.4} -> {:.4})",
            record.cell,
            record.pretrain.objective.name(),
            record.pretrain.steps,
            record.loss_summary.steps,
            record.loss_summary.initial,
            record.loss_summary.r#final
        );
        print!("  {:<12}", "depth");
        for d in &record.depths {
            print!(" {d:>10.2}");
        }
        println!("      slope");
        for profile in &record.profiles {
            print!("  {:<12}", profile.metric.name());
            for &(_, drift) in &profile.points {
                print!(" {drift:>10.6}");
            }
            match record.slope_for(profile.metric) {
                Some(fit) => println!(" {:>10.6}", fit.slope),
                None => println!(" {:>10}", "NA"),
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Builds the shared distance schedule from held-in training rows: a seeded
/// shuffle, clipped to the configured row length.
fn distance_schedule(spec: &ExperimentSpec, train: &Corpus) -> Result<Schedule> {
    let d = &spec.distance;
    let mut order: Vec<usize> = (0..train.rows.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(
        "distance-schedule",
        &[&d.seed.to_string()],
    )));
    let needed = d.batches * d.rows_per_batch;
    let batches: Vec<Vec<Vec<usize>>> = (0..d.batches)
        .map(|b| {
            (0..d.rows_per_batch)
                .map(|r| {
                    let row = &train.rows[order[(b * d.rows_per_batch + r) % order.len()]];
                    row[..row.len().min(d.row_len)].to_vec()
                })
                .collect()
        })
        .collect();
    if needed > order.len() {
        eprintln!(
            "note: schedule reuses rows ({} needed, {} available)",
            needed,
            order.len()
        );
    }
    Ok(Schedule::new(batches, d.seed)?)
}

fn distance(common: &CommonArgs) -> Result<ExitCode> {
    let (spec, out) = load(common)?;
    spec.validate()?;
    let corpus = materialize_corpus(&spec.corpus)?;
    let corpus_hash = corpus.content_hash();
    let (train, _probes) = corpus.split_probes(spec.probe_count, spec.probe_seed)?;
    let schedule = distance_schedule(&spec, &train)?;
    let cache = out.join("pretrained");
    let dir = out.join("distance");
    fs::create_dir_all(&dir)?;

    let others: Vec<ObjectiveKind> = spec
        .objectives
        .iter()
        .copied()
        .filter(|&o| o != spec.distance.reference)
        .collect();
    let cfg = ReportConfig {
        jl_dims: spec.distance.jl_dims.clone(),
        jl_seed: spec.distance.jl_seed,
    };

    for named in &spec.models {
        for &seed in &spec.seeds {
            let (model, _) = pretrain_cached(
                named,
                &spec.pretrain,
                &spec.objective,
                &train.rows,
                &corpus_hash,
                seed,
                &cache,
            )?;
            let report = distance_report(&model, spec.distance.reference, &others, &schedule, &cfg)?;
            let path = dir.join(format!("{}.seed{}.json", named.name, seed));
            fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
            println!("{} seed {seed} (reference {}):", named.name, report.reference);
            for row in &report.rows {
                println!(
                    "  {:<14} alignment {:.4}  mean-cosine {}  coherence {:.4}",
                    row.objective,
                    row.procrustes,
                    row.cosine_full
                        .map_or("NA".to_string(), |v| format!("{v:.4}")),
                    row.coherence
                );
            }
            println!("  -> {}", path.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Loads the per-model distance reports, keeping each model's
/// smallest-seed report.
fn load_distances(out: &Path) -> Result<Vec<(String, DistanceReport)>> {
    let dir = out.join("distance");
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut by_model: BTreeMap<String, DistanceReport> = BTreeMap::new();
    for path in paths {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| anyhow!("unreadable file name {}", path.display()))?;
        let Some((model, _seed)) = stem.split_once(".seed") else {
            continue;
        };
        let report: DistanceReport = serde_json::from_str(&fs::read_to_string(&path)?)?;
        by_model.entry(model.to_string()).or_insert(report);
    }
    Ok(by_model.into_iter().collect())
}

fn report(common: &CommonArgs) -> Result<ExitCode> {
    let (_, out) = load(common)?;
    let records = load_records(&out)?;
    let distances = load_distances(&out)?;
    let written = emit_report(&records, &distances, &out.join("report"))?;
    for path in &written {
        println!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn selftest() -> Result<ExitCode> {
    let check = |name: &str, ok: bool, detail: String| -> Result<()> {
        if ok {
            println!("selftest: {name} ... ok ({detail})");
            Ok(())
        } else {
            bail!("selftest: {name} FAILED ({detail})");
        }
    };

    // 1. The synthetic corpus follows its configured power law.
    let corpus = Corpus::generate_zipf(4_000, 32, 250, 1.1, 17)?;
    let slope = corpus.rank_frequency_slope(50, 30)?;
    check(
        "zipf rank-frequency slope",
        (slope + 1.1).abs() < 0.1,
        format!("slope {slope:.4}, target -1.1"),
    )?;

    // 2. Exact small-sample sign-test values.
    let p89 = plab_core::stats::sign_test_pvalue(8, 9)?;
    let p99 = plab_core::stats::sign_test_pvalue(9, 9)?;
    check(
        "sign test exact values",
        p89 == 0.039_062_5 && p99 == 0.003_906_25,
        format!("p(8,9)={p89}, p(9,9)={p99}"),
    )?;

    // 3. Metric identities on random data.
    {
        use plab_core::metrics::{cka_distance, procrustes_distance, rsa_distance, Mat};
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Mat::new(
            64,
            8,
            (0..64 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )?;
        // A Givens rotation in coordinates (2, 5).
        let (c, s) = (0.6f64, 0.8f64);
        let mut rotated = vec![0.0; 64 * 8];
        for r in 0..64 {
            let row = x.row(r);
            for (j, &v) in row.iter().enumerate() {
                rotated[r * 8 + j] = v;
            }
            rotated[r * 8 + 2] = c * row[2] - s * row[5];
            rotated[r * 8 + 5] = s * row[2] + c * row[5];
        }
        let y = Mat::new(64, 8, rotated)?;
        let d_rot = procrustes_distance(&x, &y)?;
        let d_cka = cka_distance(&x, &y)?;
        let d_rsa_self = rsa_distance(&x, &x)?;
        check(
            "metric identities",
            d_rot < 1e-10 && d_cka < 1e-10 && d_rsa_self.abs() < 1e-12,
            format!("rotation {d_rot:.2e}, similarity {d_cka:.2e}, rank-self {d_rsa_self:.2e}"),
        )?;
    }

    // 4. A tiny matrix reruns byte-identically.
    {
        let spec = tiny_spec();
        let base = std::env::temp_dir().join(format!("plab-selftest-{}", std::process::id()));
        let dir_a = base.join("a");
        let dir_b = base.join("b");
        let result = (|| -> Result<(usize, bool)> {
            let out_a = run_matrix(&spec, &dir_a, 1, &CellFilter::default())?;
            let out_b = run_matrix(&spec, &dir_b, 1, &CellFilter::default())?;
            let equal = out_a.records.len() == out_b.records.len()
                && out_a
                    .records
                    .iter()
                    .zip(&out_b.records)
                    .all(|(a, b)| match (a.canonical_payload(), b.canonical_payload()) {
                        (Ok(pa), Ok(pb)) => pa == pb,
                        _ => false,
                    });
            Ok((out_a.records.len(), equal && out_a.failures.is_empty()))
        })();
        let _ = fs::remove_dir_all(&base);
        let (cells, identical) = result?;
        check(
            "deterministic rerun",
            cells == 1 && identical,
            format!("{cells} cell(s), payloads identical: {identical}"),
        )?;
    }

    println!("selftest: all checks passed");
    Ok(ExitCode::SUCCESS)
}

/// A minimal but complete spec for the self-test's determinism check.
fn tiny_spec() -> ExperimentSpec {
    let mut spec = ExperimentSpec::example();
    spec.models = vec![NamedModel {
        name: "tiny".to_string(),
        config: ModelConfig {
            vocab_size: 64,
            max_seq_len: 16,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            dropout: 0.1,
            adapters: None,
            ..ExperimentSpec::example().models[0].config.clone()
        },
    }];
    spec.objectives = vec![ObjectiveKind::Mlm];
    spec.conditions = vec![Condition::Standard];
    spec.seeds = vec![0];
    spec.corpus = CorpusSpec::ZipfSynthetic {
        sequences: 60,
        seq_len: 16,
        alphabet: 50,
        exponent: 1.1,
        seed: 2,
    };
    spec.probe_count = 16;
    spec.depths = vec![0.5, 1.0];
    spec.pretrain.steps = 3;
    spec.pretrain.batch_rows = 8;
    spec.pretrain.accumulation = 1;
    spec.finetune.steps = 2;
    spec.finetune.batch_rows = 8;
    spec.finetune.accumulation = 2;
    spec.distance.row_len = 12;
    spec.distance.jl_dims = vec![8, 4];
    spec.distance.batches = 4;
    spec.distance.rows_per_batch = 4;
    spec
}
