//! Report emission: CSV tables and SVG depth-profile plots built from run
//! records (and, optionally, objective-distance reports). Everything here
//! is read straight out of the records; the only derived quantities are the
//! declared ones — condition ratios, seed means, and the concordance
//! statistics.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use csv::{Terminator, WriterBuilder};

use plab_core::distances::DistanceReport;
use plab_core::metrics::MetricKind;
use plab_core::objectives::ObjectiveKind;
use plab_core::stats::{sign_test_pvalue, spearman, StatsError};
use plab_core::trainer::Condition;

use crate::records::RunRecord;
use crate::svg::{depth_profile_svg, Series};
use crate::HarnessError;

/// Marker for values a table cannot state (missing cell, undefined ratio).
const NA: &str = "NA";

fn fmt(value: f64) -> String {
    if value.is_finite() {
        format!("{value}")
    } else {
        NA.to_string()
    }
}

fn fmt_opt(value: Option<f64>) -> String {
    value.map_or_else(|| NA.to_string(), fmt)
}

/// The distinct values of each cell coordinate, in canonical order:
/// models sorted by name, objectives/conditions/metrics in their declared
/// enum order, seeds ascending.
struct Axes {
    models: Vec<String>,
    objectives: Vec<ObjectiveKind>,
    conditions: Vec<Condition>,
    seeds: Vec<u64>,
}

impl Axes {
    fn from_records(records: &[RunRecord]) -> Self {
        let models: BTreeSet<String> = records.iter().map(|r| r.cell.model.clone()).collect();
        let seeds: BTreeSet<u64> = records.iter().map(|r| r.cell.seed).collect();
        let objectives = ObjectiveKind::ALL
            .into_iter()
            .filter(|&o| records.iter().any(|r| r.cell.objective == o))
            .collect();
        let conditions = Condition::ALL
            .into_iter()
            .filter(|&c| records.iter().any(|r| r.cell.condition == c))
            .collect();
        Self {
            models: models.into_iter().collect(),
            objectives,
            conditions,
            seeds: seeds.into_iter().collect(),
        }
    }
}

fn find<'a>(
    records: &'a [RunRecord],
    model: &str,
    objective: ObjectiveKind,
    condition: Condition,
    seed: u64,
) -> Option<&'a RunRecord> {
    records.iter().find(|r| {
        r.cell.model == model
            && r.cell.objective == objective
            && r.cell.condition == condition
            && r.cell.seed == seed
    })
}

fn rfc4180(path: &Path) -> Result<csv::Writer<fs::File>, HarnessError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(WriterBuilder::new()
        .terminator(Terminator::CRLF)
        .from_writer(fs::File::create(path)?))
}

/// Slope table: per (model, objective, seed, metric), the fitted slope under
/// each condition, plus the equal-step/standard ratio. The ratio is marked
/// undefined — not infinite — when the standard slope is zero or either
/// slope is missing.
fn write_slopes(
    records: &[RunRecord],
    axes: &Axes,
    path: &Path,
) -> Result<(), HarnessError> {
    let mut w = rfc4180(path)?;
    let mut header = vec![
        "model".to_string(),
        "objective".to_string(),
        "seed".to_string(),
        "metric".to_string(),
    ];
    header.extend(
        axes.conditions
            .iter()
            .map(|c| format!("slope_{}", c.name())),
    );
    header.push("ratio_equal_step_over_standard".to_string());
    w.write_record(&header)?;

    for model in &axes.models {
        for &objective in &axes.objectives {
            for &seed in &axes.seeds {
                for metric in MetricKind::ALL {
                    let mut row = vec![
                        model.clone(),
                        objective.name().to_string(),
                        seed.to_string(),
                        metric.name().to_string(),
                    ];
                    let slope_under = |condition: Condition| -> Option<f64> {
                        find(records, model, objective, condition, seed)
                            .and_then(|r| r.slope_for(metric))
                            .map(|fit| fit.slope)
                    };
                    for &condition in &axes.conditions {
                        row.push(fmt_opt(slope_under(condition)));
                    }
                    let ratio = match (
                        slope_under(Condition::EqualStep),
                        slope_under(Condition::Standard),
                    ) {
                        (Some(eq), Some(std)) if std != 0.0 && (eq / std).is_finite() => {
                            Some(eq / std)
                        }
                        _ => None,
                    };
                    row.push(fmt_opt(ratio));
                    w.write_record(&row)?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Mean slope over seeds for one (model, objective, condition, metric), if
/// any seed recorded it.
fn mean_slope(
    records: &[RunRecord],
    axes: &Axes,
    model: &str,
    objective: ObjectiveKind,
    condition: Condition,
    metric: MetricKind,
) -> Option<f64> {
    let values: Vec<f64> = axes
        .seeds
        .iter()
        .filter_map(|&seed| {
            find(records, model, objective, condition, seed)
                .and_then(|r| r.slope_for(metric))
                .map(|fit| fit.slope)
        })
        .collect();
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Distance-vs-slope table: each objective's training-free distance from
/// the reference next to its seed-mean standard-condition slope.
fn write_distance_slope(
    records: &[RunRecord],
    axes: &Axes,
    distances: &[(String, DistanceReport)],
    path: &Path,
) -> Result<(), HarnessError> {
    let mut w = rfc4180(path)?;
    w.write_record([
        "model",
        "metric",
        "objective",
        "distance_procrustes",
        "slope_mean_standard",
    ])?;
    for (model, report) in distances {
        for metric in MetricKind::ALL {
            for row in &report.rows {
                let Some(objective) = ObjectiveKind::parse(&row.objective) else {
                    continue;
                };
                let slope = mean_slope(records, axes, model, objective, Condition::Standard, metric);
                w.write_record(&[
                    model.clone(),
                    metric.name().to_string(),
                    row.objective.clone(),
                    fmt(row.procrustes),
                    fmt_opt(slope),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Concordance between the training-free distances and the measured slopes,
/// per model and metric: Spearman rank correlation over objectives, and a
/// two-sided sign test over strictly-ordered objective pairs.
fn write_concordance(
    records: &[RunRecord],
    axes: &Axes,
    distances: &[(String, DistanceReport)],
    path: &Path,
) -> Result<(), HarnessError> {
    let mut w = rfc4180(path)?;
    w.write_record([
        "model",
        "metric",
        "n_objectives",
        "spearman_rho",
        "concordant_pairs",
        "strict_pairs",
        "sign_test_p",
    ])?;
    for (model, report) in distances {
        for metric in MetricKind::ALL {
            let mut pairs: Vec<(f64, f64)> = Vec::new();
            for row in &report.rows {
                let Some(objective) = ObjectiveKind::parse(&row.objective) else {
                    continue;
                };
                if let Some(slope) =
                    mean_slope(records, axes, model, objective, Condition::Standard, metric)
                {
                    pairs.push((row.procrustes, slope));
                }
            }
            let (ds, ss): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            let rho = match spearman(&ds, &ss) {
                Ok(v) => Some(v),
                Err(StatsError::ZeroVariance | StatsError::TooFew { .. }) => None,
                Err(e) => return Err(e.into()),
            };
            let mut concordant = 0usize;
            let mut strict = 0usize;
            for i in 0..pairs.len() {
                for j in (i + 1)..pairs.len() {
                    let dd = pairs[i].0 - pairs[j].0;
                    let dsl = pairs[i].1 - pairs[j].1;
                    if dd != 0.0 && dsl != 0.0 {
                        strict += 1;
                        if (dd > 0.0) == (dsl > 0.0) {
                            concordant += 1;
                        }
                    }
                }
            }
            let p = if strict == 0 {
                None
            } else {
                Some(sign_test_pvalue(concordant, strict)?)
            };
            w.write_record(&[
                model.clone(),
                metric.name().to_string(),
                pairs.len().to_string(),
                fmt_opt(rho),
                concordant.to_string(),
                strict.to_string(),
                fmt_opt(p),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Normalized-profile table: each record's stored per-depth drift fractions
/// under the similarity metric, plus the final-layer fraction.
fn write_normalized(records: &[RunRecord], path: &Path) -> Result<(), HarnessError> {
    let mut w = rfc4180(path)?;
    let depths: Vec<f64> = records
        .first()
        .map(|r| r.depths.clone())
        .unwrap_or_default();
    let mut header = vec![
        "model".to_string(),
        "objective".to_string(),
        "condition".to_string(),
        "seed".to_string(),
    ];
    header.extend(depths.iter().map(|d| format!("fraction_at_{d}")));
    header.push("final_fraction".to_string());
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.cell.model.clone(),
            r.cell.objective.name().to_string(),
            r.cell.condition.name().to_string(),
            r.cell.seed.to_string(),
        ];
        match &r.normalized_cka {
            Some(fractions) => row.extend(fractions.iter().map(|&f| fmt(f))),
            None => row.extend(std::iter::repeat(NA.to_string()).take(r.depths.len())),
        }
        row.push(fmt_opt(r.final_fraction_cka));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// The full depth-profile dump, one row per (cell, metric, depth).
fn write_profiles(records: &[RunRecord], path: &Path) -> Result<(), HarnessError> {
    let mut w = rfc4180(path)?;
    w.write_record([
        "model",
        "objective",
        "condition",
        "seed",
        "metric",
        "depth",
        "drift",
    ])?;
    for r in records {
        for profile in &r.profiles {
            for &(depth, drift) in &profile.points {
                w.write_record(&[
                    r.cell.model.clone(),
                    r.cell.objective.name().to_string(),
                    r.cell.condition.name().to_string(),
                    r.cell.seed.to_string(),
                    profile.metric.name().to_string(),
                    fmt(depth),
                    fmt(drift),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Seed-mean depth profile for one (model, objective, condition, metric).
fn mean_profile(
    records: &[RunRecord],
    axes: &Axes,
    model: &str,
    objective: ObjectiveKind,
    condition: Condition,
    metric: MetricKind,
) -> Option<Vec<(f64, f64)>> {
    let profiles: Vec<&Vec<(f64, f64)>> = axes
        .seeds
        .iter()
        .filter_map(|&seed| {
            find(records, model, objective, condition, seed)
                .and_then(|r| r.profile_for(metric))
                .map(|p| &p.points)
        })
        .collect();
    let first = profiles.first()?;
    let mut mean: Vec<(f64, f64)> = first.iter().map(|&(d, _)| (d, 0.0)).collect();
    for points in &profiles {
        for (slot, &(_, y)) in mean.iter_mut().zip(points.iter()) {
            slot.1 += y / profiles.len() as f64;
        }
    }
    Some(mean)
}

/// Emits all report artifacts into `out_dir` and returns the paths written.
/// Distance reports are optional; when none are given the distance-vs-slope
/// and concordance tables are skipped.
pub fn emit_report(
    records: &[RunRecord],
    distances: &[(String, DistanceReport)],
    out_dir: &Path,
) -> Result<Vec<PathBuf>, HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::NoRecords);
    }
    fs::create_dir_all(out_dir)?;
    let axes = Axes::from_records(records);
    let mut written = Vec::new();

    let slopes = out_dir.join("slopes.csv");
    write_slopes(records, &axes, &slopes)?;
    written.push(slopes);

    if !distances.is_empty() {
        let table = out_dir.join("distance_slope.csv");
        write_distance_slope(records, &axes, distances, &table)?;
        written.push(table);
        let concordance = out_dir.join("concordance.csv");
        write_concordance(records, &axes, distances, &concordance)?;
        written.push(concordance);
    }

    let normalized = out_dir.join("normalized_profiles.csv");
    write_normalized(records, &normalized)?;
    written.push(normalized);

    let profiles = out_dir.join("depth_profiles.csv");
    write_profiles(records, &profiles)?;
    written.push(profiles);

    for model in &axes.models {
        for metric in MetricKind::ALL {
            for &condition in &axes.conditions {
                let series: Vec<Series> = axes
                    .objectives
                    .iter()
                    .filter_map(|&objective| {
                        mean_profile(records, &axes, model, objective, condition, metric).map(
                            |points| Series {
                                label: objective.name().to_string(),
                                points,
                            },
                        )
                    })
                    .collect();
                if series.is_empty() {
                    continue;
                }
                let title = format!("{model} — {} — {}", metric.name(), condition.name());
                let svg = depth_profile_svg(&title, "seed-mean drift", &series);
                let path = out_dir.join(format!(
                    "profile.{model}.{}.{}.svg",
                    metric.name(),
                    condition.name()
                ));
                fs::write(&path, svg)?;
                written.push(path);
            }
        }
    }

    Ok(written)
}
