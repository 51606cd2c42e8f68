//! On-disk run artifacts: report JSON, per-generation CSV, cross-evaluation
//! CSV, models and the pseudo-label store.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{RunOutcome, RunReport};
use crate::datasets::save_mask;
use crate::error::Result;
use crate::learners::save_model;

/// Rows of `generation,mode,split,metric,value`.
pub fn generations_csv(report: &RunReport) -> String {
    let mut s = String::from("generation,mode,split,metric,value\n");
    for r in &report.rows {
        let mut line = |split: &str, metric: &str, v: f64| {
            let _ = writeln!(s, "{},{},{split},{metric},{v}", r.row, r.mode);
        };
        line("reference", &report.metric, r.reference);
        for (j, v) in r.subsets.iter().enumerate() {
            line(&format!("reference_{}", j + 1), &report.metric, *v);
        }
        line("test", &report.metric, r.test);
        if let Some(g) = r.test_global_dsc {
            line("test", "global_dsc", g);
        }
    }
    s
}

/// One row per generation: every subset model on every subset, the merged
/// cross-assigned labels on R, and the test score.
pub fn cross_eval_csv(report: &RunReport) -> String {
    let k = report.cross_eval.first().map_or(2, |m| m.entries.len());
    let mut s = String::from("generation");
    for j in 0..k {
        for m in 0..k {
            let _ = write!(s, ",M{}@R{}", m + 1, j + 1);
        }
    }
    s.push_str(",merged_R,test\n");
    for c in &report.cross_eval {
        let _ = write!(s, "{}", c.generation);
        for j in 0..k {
            for m in 0..k {
                let _ = write!(s, ",{}", c.entries[m][j]);
            }
        }
        let _ = writeln!(s, ",{},{}", c.merged_reference_score, c.test_score);
    }
    s
}

fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

/// Writes `report.json`, `generations.csv`, `cross_eval.csv` (cross-subset
/// runs), `models/` and `store/` under `dir`.
pub fn write_run_artifacts(outcome: &RunOutcome, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("models"))?;
    fs::create_dir_all(dir.join("store").join("masks"))?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&outcome.report)?)?;
    fs::write(dir.join("generations.csv"), generations_csv(&outcome.report))?;
    if !outcome.report.cross_eval.is_empty() {
        fs::write(dir.join("cross_eval.csv"), cross_eval_csv(&outcome.report))?;
    }
    for (id, model) in &outcome.state.registry {
        save_model(model, dir.join("models").join(format!("{}.mdl", file_stem(id))))?;
    }
    for (id, entry) in outcome.state.store.entries() {
        save_mask(&entry.label, dir.join("store").join("masks").join(format!("{}.msk", file_stem(id))))?;
    }
    fs::write(dir.join("store").join("ledger.json"), serde_json::to_string_pretty(outcome.state.store.ledger())?)?;
    Ok(())
}
