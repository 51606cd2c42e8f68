//! Multi-seed execution and the aggregated result bundle.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::render::{write_report, Layout};
use crate::error::{Error, Result};
use crate::orchestrator::{
    run, run_reduced_class_protocol, run_transfer, write_run_artifacts, Mode, ReducedProtocolReport, RunOutcome,
    RunReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BundleKind {
    SemiSupervised,
    Transfer,
    ReducedClass,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleProvenance {
    pub config_hash: String,
    pub code_version: String,
    pub seeds: Vec<u64>,
}

/// Mean, sample standard deviation and normal 95% interval of one value
/// across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub mode: Mode,
    pub generation: usize,
    /// `G0`..`GT` or `final`.
    pub row: String,
    pub split: String,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunFailure {
    pub seed: u64,
    pub what: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReportBundle {
    pub kind: BundleKind,
    pub provenance: BundleProvenance,
    pub runs: Vec<RunReport>,
    pub aggregates: Vec<AggregateRow>,
    pub reduced: Vec<ReducedProtocolReport>,
    pub failures: Vec<RunFailure>,
}

impl RunReportBundle {
    pub fn new(kind: BundleKind, cfg: &ExperimentConfig) -> Self {
        Self {
            kind,
            provenance: BundleProvenance {
                config_hash: cfg.hash(),
                code_version: env!("CARGO_PKG_VERSION").to_owned(),
                seeds: Vec::new(),
            },
            runs: Vec::new(),
            aggregates: Vec::new(),
            reduced: Vec::new(),
            failures: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty() && self.reduced.is_empty()
    }

    pub fn aggregate(&self, mode: Mode, row: &str, split: &str, metric: &str) -> Option<&AggregateRow> {
        self.aggregates.iter().find(|a| a.mode == mode && a.row == row && a.split == split && a.metric == metric)
    }
}

/// `(split, metric, value)` triples of one report row, in a fixed order.
pub fn row_values(report: &RunReport, row: usize) -> Vec<(String, String, f64)> {
    let r = &report.rows[row];
    let mut out = vec![("reference".to_owned(), report.metric.clone(), r.reference)];
    for (j, v) in r.subsets.iter().enumerate() {
        out.push((format!("reference_{}", j + 1), report.metric.clone(), *v));
    }
    out.push(("test".to_owned(), report.metric.clone(), r.test));
    if let Some(g) = r.test_global_dsc {
        out.push(("test".to_owned(), "global_dsc".to_owned(), g));
    }
    out
}

pub fn summarize(values: &[f64]) -> (f64, f64, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let half = 1.96 * std / n.sqrt();
    (mean, std, mean - half, mean + half)
}

/// Groups every run's rows by mode, row position and value slot.
pub fn aggregate_runs(runs: &[RunReport]) -> Vec<AggregateRow> {
    type Key = (Mode, usize, usize);
    let mut groups: BTreeMap<Key, (usize, String, String, String, Vec<f64>)> = BTreeMap::new();
    for report in runs {
        for (i, row) in report.rows.iter().enumerate() {
            for (slot, (split, metric, v)) in row_values(report, i).into_iter().enumerate() {
                groups
                    .entry((report.mode, i, slot))
                    .or_insert_with(|| (row.generation, row.row.clone(), split, metric, Vec::new()))
                    .4
                    .push(v);
            }
        }
    }
    groups
        .into_iter()
        .map(|((mode, _, _), (generation, row, split, metric, values))| {
            let (mean, std, ci_low, ci_high) = summarize(&values);
            AggregateRow { mode, generation, row, split, metric, n: values.len(), mean, std, ci_low, ci_high }
        })
        .collect()
}

fn persist(bundle: &RunReportBundle, out: Option<&Path>, name: &str) -> Result<()> {
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(name), serde_json::to_string_pretty(bundle)?)?;
    }
    Ok(())
}

fn finish(bundle: &RunReportBundle, layouts: &[Layout], out: Option<&Path>) -> Result<()> {
    let Some(dir) = out else { return Ok(()) };
    persist(bundle, out, "bundle.json")?;
    let partial = dir.join("bundle.partial.json");
    if partial.exists() {
        fs::remove_file(partial)?;
    }
    for &layout in layouts {
        write_report(bundle, layout, dir.join(layout.file_name()))?;
    }
    Ok(())
}

fn fail(bundle: &mut RunReportBundle, out: Option<&Path>, seed: u64, what: String, e: Error) -> Error {
    bundle.failures.push(RunFailure { seed, what: what.clone(), error: e.to_string() });
    bundle.aggregates = aggregate_runs(&bundle.runs);
    if let Err(io) = persist(bundle, out, "bundle.partial.json") {
        log::error!("could not persist partial results: {io}");
    }
    Error::InRun { seed, what, source: Box::new(e) }
}

/// Runs every configured mode on every sweep seed. A transfer sweep when the
/// config has a shift. With `out`, each run's artifacts go to
/// `out/runs/<mode>-seed<seed>/` and the bundle plus the configured layouts
/// to `out/`; on failure the finished runs are kept in `bundle.partial.json`.
pub fn sweep(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunReportBundle> {
    cfg.validate()?;
    let kind = if cfg.shift.is_some() { BundleKind::Transfer } else { BundleKind::SemiSupervised };
    let mut bundle = RunReportBundle::new(kind, cfg);
    for seed in cfg.sweep.seeds() {
        bundle.provenance.seeds.push(seed);
        let data = match kind {
            BundleKind::Transfer => cfg.transfer_pair(seed).map(|(s, t)| (s, Some(t))),
            _ => cfg.dataset(seed).map(|d| (d, None)),
        };
        let (data, target) = match data {
            Ok(d) => d,
            Err(e) => return Err(fail(&mut bundle, out, seed, "dataset".into(), e)),
        };
        for &mode in &cfg.modes {
            let settings = cfg.settings(mode, seed);
            let outcome: Result<RunOutcome> = match &target {
                Some(t) => run_transfer(&data, t, &settings),
                None => run(&data, &settings),
            };
            let outcome = match outcome {
                Ok(o) => o,
                Err(e) => return Err(fail(&mut bundle, out, seed, format!("mode {mode}"), e)),
            };
            if let Some(dir) = out {
                write_run_artifacts(&outcome, dir.join("runs").join(format!("{mode}-seed{seed}")))?;
            }
            bundle.runs.push(outcome.report);
        }
    }
    bundle.aggregates = aggregate_runs(&bundle.runs);
    finish(&bundle, &cfg.report.layouts, out)?;
    Ok(bundle)
}

/// The reduced-class protocol on every sweep seed.
pub fn reduced_sweep(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunReportBundle> {
    cfg.validate()?;
    let mapping = cfg.class_mapping()?;
    let mut bundle = RunReportBundle::new(BundleKind::ReducedClass, cfg);
    for seed in cfg.sweep.seeds() {
        bundle.provenance.seeds.push(seed);
        let report = cfg.dataset(seed).and_then(|d| run_reduced_class_protocol(&d, &mapping, &cfg.settings(Mode::Atso, seed)));
        match report {
            Ok(r) => bundle.reduced.push(r),
            Err(e) => return Err(fail(&mut bundle, out, seed, "reduced protocol".into(), e)),
        }
    }
    finish(&bundle, &[Layout::Table3, Layout::Json], out)?;
    Ok(bundle)
}

/// Loads a bundle written by a sweep.
pub fn read_bundle(path: impl AsRef<Path>) -> Result<RunReportBundle> {
    let text = fs::read(path)?;
    Ok(serde_json::from_slice(&text)?)
}
