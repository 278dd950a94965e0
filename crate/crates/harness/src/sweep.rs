//! Axis sweeps: one run per grid point and seed, seed-averaged summaries and
//! rank correlation of each measure with the generalization gap.

use flatmin_core::analysis::kendall_tau;
use flatmin_core::optimizers::StepRecord;
use flatmin_core::rng;
use flatmin_core::sharpness::MeasureReport;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{HarnessError, Result};
use crate::report::{OutputDir, Table};
use crate::train::{train_to_threshold, RunRecord};

/// Seed actually used for a listed seed under a master seed.
pub fn effective_seed(master: u64, listed: u64) -> u64 {
    rng::derive_seed(master, &[listed])
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRun {
    pub point: usize,
    pub value: String,
    pub record: RunRecord,
    pub step_log: Vec<StepRecord>,
}

/// Seed average over the converged runs of one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub value: String,
    pub runs: usize,
    pub converged: usize,
    pub mean_train_error: f64,
    pub mean_test_error: f64,
    pub mean_gap: f64,
    /// Measure name and mean value, in configured order.
    pub measures: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub measure: String,
    pub axis: String,
    pub tau: f64,
    pub ci95: f64,
    /// Number of seed-averaged grid points entering the correlation.
    pub n: usize,
}

impl CorrelationRow {
    pub const CSV_HEADER: &'static str = "measure,axis,tau,ci95,n";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.measure, self.axis, self.tau, self.ci95, self.n
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub axis: String,
    pub runs: Vec<SweepRun>,
    pub points: Vec<PointSummary>,
    pub correlations: Vec<CorrelationRow>,
    pub warnings: Vec<String>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Runs every grid point for every listed seed, in parallel, and summarizes.
/// Only converged runs enter the averages and correlations.
pub fn run_sweep(config: &Config, master_seed: u64) -> Result<SweepOutcome> {
    let spec = config
        .sweep
        .as_ref()
        .ok_or_else(|| HarnessError::config("config has no sweep.* section"))?;
    let axis = spec.label();
    let points: Vec<Config> = spec
        .values
        .iter()
        .map(|v| config.sweep_point(v))
        .collect::<Result<_>>()?;
    let seeds = &config.experiment.seeds;
    let jobs: Vec<(usize, u64)> = (0..points.len())
        .flat_map(|p| seeds.iter().map(move |&s| (p, s)))
        .collect();

    let runs: Vec<SweepRun> = jobs
        .par_iter()
        .map(|&(p, s)| {
            let run_id = format!("p{p:02}_s{s}");
            let out = train_to_threshold(
                &points[p].experiment,
                effective_seed(master_seed, s),
                &run_id,
            )?;
            Ok(SweepRun {
                point: p,
                value: spec.values[p].clone(),
                record: out.record,
                step_log: out.step_log,
            })
        })
        .collect::<Result<_>>()?;

    let measure_names: Vec<String> = config
        .experiment
        .measures
        .measures
        .iter()
        .map(|m| m.as_str().to_string())
        .collect();
    let summaries: Vec<PointSummary> = spec
        .values
        .iter()
        .enumerate()
        .map(|(p, v)| {
            let here: Vec<&RunRecord> = runs
                .iter()
                .filter(|r| r.point == p)
                .map(|r| &r.record)
                .collect();
            let ok: Vec<&&RunRecord> = here.iter().filter(|r| r.converged).collect();
            PointSummary {
                value: v.clone(),
                runs: here.len(),
                converged: ok.len(),
                mean_train_error: mean(ok.iter().map(|r| r.final_train_error)),
                mean_test_error: mean(ok.iter().map(|r| r.test_error)),
                mean_gap: mean(ok.iter().map(|r| r.gap())),
                measures: measure_names
                    .iter()
                    .map(|m| (m.clone(), mean(ok.iter().filter_map(|r| r.measure(m)))))
                    .collect(),
            }
        })
        .collect();

    let mut warnings = Vec::new();
    for r in runs.iter().filter(|r| !r.record.converged) {
        warnings.push(format!(
            "run {} did not converge ({}); excluded",
            r.record.run_id,
            r.record
                .failure
                .as_deref()
                .unwrap_or("loss above threshold")
        ));
    }
    let usable: Vec<&PointSummary> = summaries.iter().filter(|s| s.converged > 0).collect();
    let mut correlations = Vec::new();
    if usable.len() < 2 {
        warnings.push(format!(
            "axis {axis}: {} grid point(s) with converged runs; correlation skipped",
            usable.len()
        ));
    } else {
        let gaps: Vec<f64> = usable.iter().map(|s| s.mean_gap).collect();
        for (j, name) in measure_names.iter().enumerate() {
            let vals: Vec<f64> = usable.iter().map(|s| s.measures[j].1).collect();
            match kendall_tau(&gaps, &vals) {
                Ok(c) => correlations.push(CorrelationRow {
                    measure: name.clone(),
                    axis: axis.clone(),
                    tau: c.tau,
                    ci95: c.ci95_halfwidth,
                    n: c.n,
                }),
                Err(e) => warnings.push(format!(
                    "axis {axis}, measure {name}: correlation skipped ({e})"
                )),
            }
        }
    }
    Ok(SweepOutcome {
        axis,
        runs,
        points: summaries,
        correlations,
        warnings,
    })
}

/// Step log table; the wallclock column is kept last so it can be dropped
/// when comparing runs.
pub fn step_log_table(log: &[StepRecord]) -> Table {
    let mut t = Table::new(StepRecord::CSV_HEADER);
    log.iter().for_each(|r| t.push_line(&r.csv_row()));
    t
}

pub fn runs_table<'a>(records: impl IntoIterator<Item = &'a RunRecord>) -> Table {
    let mut t = Table::new(RunRecord::CSV_HEADER);
    records.into_iter().for_each(|r| t.push_line(&r.csv_row()));
    t
}

pub fn measures_table<'a>(records: impl IntoIterator<Item = &'a RunRecord>) -> Table {
    let mut t = Table::new(MeasureReport::CSV_HEADER);
    for r in records {
        r.measures
            .iter()
            .for_each(|m| t.push_line(&m.csv_row(&r.run_id)));
    }
    t
}

/// Writes every artifact of a sweep. Called from a single thread after all
/// runs finished, so file contents do not depend on scheduling.
pub fn write_sweep(out: &mut OutputDir, outcome: &mut SweepOutcome) -> Result<()> {
    for r in &mut outcome.runs {
        let rel = format!("logs/{}.{}", r.record.run_id, out.format().extension());
        let path = out.file(
            &rel,
            "step_log",
            step_log_table(&r.step_log).render(out.format()).as_bytes(),
        )?;
        r.record.step_log = Some(path);
    }
    out.table(
        "runs",
        "runs",
        &runs_table(outcome.runs.iter().map(|r| &r.record)),
    )?;
    out.table(
        "measures",
        "measures",
        &measures_table(outcome.runs.iter().map(|r| &r.record)),
    )?;

    let measure_cols: Vec<String> = outcome
        .points
        .first()
        .map(|p| {
            p.measures
                .iter()
                .map(|(m, _)| format!("mean_{m}"))
                .collect()
        })
        .unwrap_or_default();
    let mut header = vec![
        "axis",
        "value",
        "runs",
        "converged",
        "mean_train_error",
        "mean_test_error",
        "mean_gap",
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>();
    header.extend(measure_cols);
    let mut points = Table {
        header,
        rows: vec![],
    };
    for p in &outcome.points {
        let mut row = vec![
            outcome.axis.clone(),
            p.value.clone(),
            p.runs.to_string(),
            p.converged.to_string(),
            p.mean_train_error.to_string(),
            p.mean_test_error.to_string(),
            p.mean_gap.to_string(),
        ];
        row.extend(p.measures.iter().map(|(_, v)| v.to_string()));
        points.push(row);
    }
    out.table("points", "point_summary", &points)?;

    let mut corr = Table::new(CorrelationRow::CSV_HEADER);
    outcome
        .correlations
        .iter()
        .for_each(|c| corr.push_line(&c.csv_row()));
    out.table("correlation", "correlation", &corr)?;

    out.manifest.run_ids = outcome
        .runs
        .iter()
        .map(|r| r.record.run_id.clone())
        .collect();
    for w in &outcome.warnings {
        out.warn(w.clone());
    }
    Ok(())
}
