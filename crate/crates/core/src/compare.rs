//! Side-by-side summary of training runs that share data and schedule.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::attention::OperatorKind;
use crate::error::{Error, Result};
use crate::train::{plateau_exit, records_from_csv, steps_to_fraction, Convergence, RunMeta, RunTrace, TraceRecord};

pub const TRACE_CSV: &str = "trace.csv";
pub const TRACE_JSON: &str = "trace.json";
pub const PLATEAU_MARGIN: f64 = 0.05;
pub const CONVERGENCE_FRACTION: f64 = 0.95;

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedRun {
    pub source: PathBuf,
    pub records: Vec<TraceRecord>,
    pub meta: RunMeta,
}

/// Loads a run from its directory or its trace CSV. Run metadata comes from
/// the `trace.json` next to the CSV.
pub fn load_run(path: &Path) -> Result<LoadedRun> {
    let csv = if path.is_dir() { path.join(TRACE_CSV) } else { path.to_path_buf() };
    let dir = csv.parent().map(Path::to_path_buf).unwrap_or_default();
    let records = records_from_csv(&fs::read_to_string(&csv)?)?;
    let json_path = dir.join(TRACE_JSON);
    let json = fs::read_to_string(&json_path).map_err(|e| {
        Error::Incompatible(format!(
            "cannot read {} ({e}); run metadata is needed to confirm seed and schedule",
            json_path.display()
        ))
    })?;
    let meta = RunTrace::from_json(&json)?.meta;
    Ok(LoadedRun {
        source: csv,
        records,
        meta,
    })
}

/// Refuses runs whose seed, data stream, corpus or schedule differ.
pub fn check_compatible(runs: &[LoadedRun]) -> Result<()> {
    let Some(first) = runs.first() else {
        return Err(Error::Config("nothing to compare".into()));
    };
    for run in &runs[1..] {
        let (a, b) = (&first.meta, &run.meta);
        let refuse = |what: &str, x: String, y: String| {
            Err(Error::Incompatible(format!(
                "{what} differs: {x} in {} vs {y} in {}",
                first.source.display(),
                run.source.display()
            )))
        };
        if a.train.seed != b.train.seed {
            return refuse("seed", a.train.seed.to_string(), b.train.seed.to_string());
        }
        if a.corpus != b.corpus {
            return refuse("corpus", format!("{:?}", a.corpus), format!("{:?}", b.corpus));
        }
        let schedule = |m: &RunMeta| {
            let t = &m.train;
            format!(
                "steps={} warmup={} peak_lr={} batch={} eval_every={} eval_batches={} mask_prob={}",
                t.steps, t.warmup_steps, t.peak_lr, t.batch_size, t.eval_every, t.eval_batches, t.mask_prob
            )
        };
        if schedule(a) != schedule(b) {
            return refuse("schedule", schedule(a), schedule(b));
        }
        if a.data_digest != b.data_digest {
            return refuse("batch digest", a.data_digest.clone(), b.data_digest.clone());
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub operator: OperatorKind,
    pub initial_eval: f64,
    pub final_eval: f64,
    pub steps_to_fraction: Convergence,
    pub plateau_exit: Convergence,
}

pub fn summarize(runs: &[LoadedRun]) -> Result<Vec<SummaryRow>> {
    check_compatible(runs)?;
    runs.iter()
        .map(|run| {
            let r = &run.records;
            Ok(SummaryRow {
                operator: run.meta.operator,
                initial_eval: r.first().map_or(f64::NAN, |x| x.eval_loss),
                final_eval: r.last().map_or(f64::NAN, |x| x.eval_loss),
                steps_to_fraction: steps_to_fraction(r, CONVERGENCE_FRACTION)?,
                plateau_exit: plateau_exit(r, PLATEAU_MARGIN),
            })
        })
        .collect()
}

fn convergence_cell(c: Convergence) -> String {
    match c {
        Convergence::Reached(step) => step.to_string(),
        Convergence::NoConvergence => "no-convergence".into(),
    }
}

pub fn render_summary(rows: &[SummaryRow]) -> String {
    let mut out = format!(
        "{:<10} {:>12} {:>12} {:>16} {:>16}\n",
        "operator", "initial_eval", "final_eval", "steps_to_95pct", "plateau_exit"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<10} {:>12.6} {:>12.6} {:>16} {:>16}",
            r.operator.as_str(),
            r.initial_eval,
            r.final_eval,
            convergence_cell(r.steps_to_fraction),
            convergence_cell(r.plateau_exit)
        );
    }
    out
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("operator,initial_eval,final_eval,steps_to_95pct,plateau_exit\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.9e},{:.9e},{},{}",
            r.operator,
            r.initial_eval,
            r.final_eval,
            convergence_cell(r.steps_to_fraction),
            convergence_cell(r.plateau_exit)
        );
    }
    out
}

/// Long-format CSV of every run, one row per (operator, step).
pub fn combined_csv(runs: &[LoadedRun]) -> String {
    let mut out = String::from("operator,step,train_loss,eval_loss,lr\n");
    for run in runs {
        for r in &run.records {
            let _ = writeln!(
                out,
                "{},{},{:.9e},{:.9e},{:.9e}",
                run.meta.operator, r.step, r.train_loss, r.eval_loss, r.lr
            );
        }
    }
    out
}
