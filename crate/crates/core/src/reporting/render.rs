//! Text layouts of a result bundle. Table layouts print percentages at two
//! decimals.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::sweep::{summarize, RunReportBundle};
use crate::error::{Error, Result};
use crate::orchestrator::Mode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    /// Per generation, each mode's reference and test score.
    #[serde(rename = "table1")]
    Table1,
    /// Cross-subset evaluation matrix per generation.
    #[serde(rename = "appendixA")]
    AppendixA,
    /// Class-wise IoU of the reduced-class protocol.
    #[serde(rename = "table3")]
    Table3,
    /// Every aggregate row.
    #[serde(rename = "csv")]
    Csv,
    #[serde(rename = "json")]
    Json,
}

impl Layout {
    pub const ALL: [Layout; 5] = [Layout::Table1, Layout::AppendixA, Layout::Table3, Layout::Csv, Layout::Json];

    pub fn name(self) -> &'static str {
        match self {
            Layout::Table1 => "table1",
            Layout::AppendixA => "appendixA",
            Layout::Table3 => "table3",
            Layout::Csv => "csv",
            Layout::Json => "json",
        }
    }

    pub fn file_name(self) -> String {
        match self {
            Layout::Json => "report.json".into(),
            Layout::Csv => "aggregates.csv".into(),
            l => format!("{}.csv", l.name()),
        }
    }
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Layout::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config { path: "layout".into(), reason: format!("unknown layout `{s}`") })
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

fn missing(layout: Layout, fields: &[String]) -> Error {
    Error::Report(format!("bundle cannot fill the {} layout; missing: {}", layout.name(), fields.join(", ")))
}

fn table1(b: &RunReportBundle) -> Result<String> {
    let modes: Vec<Mode> = Mode::ALL.into_iter().filter(|m| b.runs.iter().any(|r| r.mode == *m)).collect();
    if modes.is_empty() {
        return Err(missing(Layout::Table1, &["runs".into()]));
    }
    let metric = &b.runs[0].metric;
    let generations = b.runs[0].generations;
    let mut s = String::from("generation");
    for m in &modes {
        let _ = write!(s, ",{}@R,{}@E", m.title(), m.title());
    }
    s.push('\n');
    let mut lacking = Vec::new();
    for g in 0..=generations {
        let row = format!("G{g}");
        s.push_str(&row);
        for &m in &modes {
            for split in ["reference", "test"] {
                match b.aggregate(m, &row, split, metric) {
                    Some(a) => {
                        let _ = write!(s, ",{}", pct(a.mean));
                    }
                    None => lacking.push(format!("{m}/{row}/{split}")),
                }
            }
        }
        s.push('\n');
    }
    if !lacking.is_empty() {
        return Err(missing(Layout::Table1, &lacking));
    }
    Ok(s)
}

fn appendix_a(b: &RunReportBundle) -> Result<String> {
    let runs: Vec<_> = b.runs.iter().filter(|r| r.mode == Mode::Atso && !r.cross_eval.is_empty()).collect();
    if runs.is_empty() {
        return Err(missing(Layout::AppendixA, &["atso runs with cross_eval".into()]));
    }
    if runs.iter().any(|r| r.cross_eval.iter().any(|c| c.entries.len() != 2)) {
        return Err(missing(Layout::AppendixA, &["two-subset cross_eval".into()]));
    }
    let mut s = String::from("generation,M1@R1,M2@R1,M1@R2,M2@R2,updated_R,M@E\n");
    let generations = runs[0].cross_eval.len();
    for g in 0..generations {
        let mut cols = vec![Vec::new(); 6];
        for r in &runs {
            let c = r.cross_eval.get(g).ok_or_else(|| missing(Layout::AppendixA, &[format!("cross_eval[{g}]")]))?;
            let e = &c.entries;
            for (i, v) in [e[0][0], e[1][0], e[0][1], e[1][1], c.merged_reference_score, c.test_score].into_iter().enumerate() {
                cols[i].push(v);
            }
        }
        let _ = write!(s, "G{g}");
        for c in &cols {
            let _ = write!(s, ",{}", pct(summarize(c).0));
        }
        s.push('\n');
    }
    Ok(s)
}

fn table3(b: &RunReportBundle) -> Result<String> {
    if b.reduced.is_empty() {
        return Err(missing(Layout::Table3, &["reduced".into()]));
    }
    let fine = b.reduced[0].fine_classes;
    // tag -> (per-class values, mIoU values), in first-seen order.
    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<String, (Vec<Vec<f64>>, Vec<f64>)> = BTreeMap::new();
    for r in &b.reduced {
        for row in &r.rows {
            let e = acc.entry(row.tag.clone()).or_insert_with(|| {
                order.push(row.tag.clone());
                (vec![Vec::new(); fine], Vec::new())
            });
            for (c, v) in row.class_iou.iter().enumerate() {
                if let Some(v) = v {
                    e.0[c].push(*v);
                }
            }
            e.1.push(row.miou);
        }
    }
    let mut s = String::from("method");
    for c in 0..fine {
        let _ = write!(s, ",c{c}");
    }
    s.push_str(",mIoU\n");
    for tag in &order {
        let (classes, miou) = &acc[tag];
        s.push_str(tag);
        for v in classes {
            s.push(',');
            if !v.is_empty() {
                s.push_str(&pct(summarize(v).0));
            }
        }
        let _ = writeln!(s, ",{}", pct(summarize(miou).0));
    }
    Ok(s)
}

fn aggregates_csv(b: &RunReportBundle) -> Result<String> {
    if b.aggregates.is_empty() {
        return Err(missing(Layout::Csv, &["aggregates".into()]));
    }
    let mut s = String::from("mode,generation,row,split,metric,n,mean,std,ci_low,ci_high\n");
    for a in &b.aggregates {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            a.mode,
            a.generation,
            a.row,
            a.split,
            a.metric,
            a.n,
            pct(a.mean),
            pct(a.std),
            pct(a.ci_low),
            pct(a.ci_high)
        );
    }
    Ok(s)
}

/// Renders `layout`; fails on an empty bundle or one lacking the layout's inputs.
pub fn render_report(bundle: &RunReportBundle, layout: Layout) -> Result<String> {
    if bundle.is_empty() {
        return Err(Error::Report("bundle is empty".into()));
    }
    match layout {
        Layout::Table1 => table1(bundle),
        Layout::AppendixA => appendix_a(bundle),
        Layout::Table3 => table3(bundle),
        Layout::Csv => aggregates_csv(bundle),
        Layout::Json => Ok(serde_json::to_string_pretty(bundle)? + "\n"),
    }
}

/// Renders fully before touching `path`, so a failure leaves no file.
pub fn write_report(bundle: &RunReportBundle, layout: Layout, path: impl AsRef<Path>) -> Result<()> {
    let text = render_report(bundle, layout)?;
    fs::write(path, text)?;
    Ok(())
}
