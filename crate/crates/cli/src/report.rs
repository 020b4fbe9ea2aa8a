//! Metric reports and plan comparison.
//!
//! A report has one metric per line in logfmt form:
//!
//! ```text
//! # arcplan report v1
//! case=default structure=PTV metric=hi value=0.0087
//! ```
//!
//! Lines starting with `#` and blank lines are ignored, so reports of several
//! cases can be concatenated into one file. Values use the shortest
//! representation that parses back to the same `f64`.

use std::collections::BTreeMap;
use std::path::Path;

use arcplan_core::analytics::{noninferiority_test, Direction, NonInferiorityResult};
use arcplan_core::MetricReport;
use serde::Serialize;

use crate::error::{CliError, Result};

pub const REPORT_HEADER: &str = "# arcplan report v1";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricLine {
    pub case: String,
    pub structure: String,
    pub metric: String,
    pub value: f64,
}

/// `(structure, metric, value)` rows of one case, structures in name order.
pub fn metric_rows(report: &MetricReport) -> Vec<(String, &'static str, f64)> {
    let mut rows = Vec::new();
    for (name, m) in &report.structures {
        for (metric, value) in [("d2", m.d2), ("d50", m.d50), ("d98", m.d98), ("dmean", m.dmean)] {
            rows.push((name.clone(), metric, value));
        }
        if let Some(hi) = m.hi {
            rows.push((name.clone(), "hi", hi));
        }
        if let Some(ci) = m.ci {
            rows.push((name.clone(), "ci", ci));
        }
    }
    rows
}

fn check_token(what: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(|c| c.is_whitespace() || c == '=') {
        return Err(CliError::Config(format!("{what} '{s}' must be non-empty without spaces or '='")));
    }
    Ok(())
}

pub fn render_report(case: &str, report: &MetricReport) -> Result<String> {
    check_token("case name", case)?;
    let mut out = format!("{REPORT_HEADER}\n");
    for (structure, metric, value) in metric_rows(report) {
        check_token("structure name", &structure)?;
        out.push_str(&format!("case={case} structure={structure} metric={metric} value={value:?}\n"));
    }
    Ok(out)
}

/// Plot-ready CSV with columns `structure,metric,value`.
pub fn render_csv(report: &MetricReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["structure", "metric", "value"]).expect("in-memory write");
    for (structure, metric, value) in metric_rows(report) {
        w.write_record([structure.as_str(), metric, &format!("{value:?}")]).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

pub fn parse_report(text: &str) -> Result<Vec<MetricLine>> {
    let mut lines = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |why: &str| CliError::Format(format!("report line {}: {why}: '{line}'", no + 1));
        let mut fields = BTreeMap::new();
        for token in line.split_whitespace() {
            let (k, v) = token.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            if fields.insert(k, v).is_some() {
                return Err(bad(&format!("duplicate key '{k}'")));
            }
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(&format!("missing '{k}'")));
        let value: f64 = get("value")?.parse().map_err(|_| bad("value is not a number"))?;
        if fields.len() != 4 {
            return Err(bad("expected exactly case, structure, metric and value"));
        }
        lines.push(MetricLine {
            case: get("case")?.to_string(),
            structure: get("structure")?.to_string(),
            metric: get("metric")?.to_string(),
            value,
        });
    }
    Ok(lines)
}

pub fn read_report(path: &Path) -> Result<Vec<MetricLine>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_report(&text).map_err(|e| e.context(path))
}

/// Margins for `plan compare`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Margins {
    pub hi: f64,
    pub gy: f64,
    pub ci: f64,
}

/// Which direction is better for a metric and which margin applies; `None`
/// for metrics that are not compared (PTV D50 and mean, organ D98).
pub fn comparison_rule(structure: &str, metric: &str, m: &Margins) -> Option<(Direction, f64)> {
    let ptv = structure == arcplan_core::phantom::PTV;
    match metric {
        "hi" => Some((Direction::LowerIsBetter, m.hi)),
        "ci" => Some((Direction::HigherIsBetter, m.ci)),
        "d98" if ptv => Some((Direction::HigherIsBetter, m.gy)),
        "d2" => Some((Direction::LowerIsBetter, m.gy)),
        "dmean" | "d50" if !ptv => Some((Direction::LowerIsBetter, m.gy)),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub structure: String,
    pub metric: String,
    pub direction: Direction,
    pub result: NonInferiorityResult,
}

/// Non-inferiority of `candidate` against `reference`, paired by case, for
/// every compared metric present in both with at least 5 cases.
pub fn compare(candidate: &[MetricLine], reference: &[MetricLine], margins: &Margins) -> Result<Vec<ComparisonRow>> {
    type Key = (String, String);
    let index = |lines: &[MetricLine]| -> Result<BTreeMap<Key, BTreeMap<String, f64>>> {
        let mut out: BTreeMap<Key, BTreeMap<String, f64>> = BTreeMap::new();
        for l in lines {
            let cases = out.entry((l.structure.clone(), l.metric.clone())).or_default();
            if cases.insert(l.case.clone(), l.value).is_some() {
                return Err(CliError::Format(format!("case '{}' reports {} {} twice", l.case, l.structure, l.metric)));
            }
        }
        Ok(out)
    };
    let (a, b) = (index(candidate)?, index(reference)?);
    let mut rows = Vec::new();
    for ((structure, metric), cases) in &a {
        let Some((direction, margin)) = comparison_rule(structure, metric, margins) else {
            continue;
        };
        let Some(ref_cases) = b.get(&(structure.clone(), metric.clone())) else {
            continue;
        };
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for (case, &x) in cases {
            if let Some(&y) = ref_cases.get(case) {
                xs.push(x);
                ys.push(y);
            }
        }
        if xs.len() < 5 {
            continue;
        }
        let result = noninferiority_test(&xs, &ys, margin, direction)?;
        rows.push(ComparisonRow { structure: structure.clone(), metric: metric.clone(), direction, result });
    }
    if rows.is_empty() {
        return Err(CliError::Format("no metric has at least 5 paired cases in both reports".into()));
    }
    Ok(rows)
}

pub fn render_comparison(rows: &[ComparisonRow]) -> String {
    let mut s = format!(
        "{:<10} {:<7} {:>5} {:>12} {:>8} {:>12} {:<14}\n",
        "structure", "metric", "n", "mean_diff", "margin", "p_value", "verdict"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<10} {:<7} {:>5} {:>12.5} {:>8.4} {:>12.4e} {:<14}\n",
            r.structure,
            r.metric,
            r.result.n,
            r.result.mean_diff,
            r.result.margin,
            r.result.p_value,
            if r.result.verdict { "non-inferior" } else { "not-shown" }
        ));
    }
    s
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["structure", "metric", "n", "mean_diff", "margin", "p_value", "verdict"]).expect("in-memory write");
    for r in rows {
        w.write_record([
            r.structure.clone(),
            r.metric.clone(),
            r.result.n.to_string(),
            format!("{:?}", r.result.mean_diff),
            format!("{:?}", r.result.margin),
            format!("{:?}", r.result.p_value),
            r.result.verdict.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}
