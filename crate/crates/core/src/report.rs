//! Report serialization: one CSV row per checkpoint, an optional JSON-lines
//! copy, and the human summary built from parsed reports.

use std::fmt::Write as _;

use num_rational::Rational64;
use serde_json::{Map, Value};
use thiserror::Error;

use crate::engine::RepairCounters;
use crate::metrics::{ConnectivityVerdict, Measured, MetricsReport};
use crate::ratio;

const BASE_COLUMNS: [&str; 19] = [
    "t",
    "n_alive",
    "connected_shadow",
    "connected_live",
    "connectivity",
    "max_degree_ratio_slack",
    "degree_violations",
    "density_subsets",
    "density_violations",
    "density_ub_violations",
    "expansion_live",
    "expansion_shadow",
    "expansion_ok",
    "lambda2_live",
    "max_stretch",
    "stretch_bound",
    "stretch_ok",
    "edge_preservation_ok",
    "coherence_ok",
];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("report is empty")]
    Empty,
    #[error("unexpected header: {0}")]
    Header(String),
    #[error("row {row}, column {column}: {msg}")]
    Field { row: usize, column: &'static str, msg: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub fn columns() -> Vec<&'static str> {
    BASE_COLUMNS.iter().copied().chain(RepairCounters::names()).collect()
}

fn opt_ratio(r: Option<Rational64>) -> String {
    r.map(ratio::format).unwrap_or_default()
}

fn measured_ratio(m: &Measured<Rational64>) -> String {
    match m {
        Measured::Value(v) => ratio::format(*v),
        Measured::Skipped(why) => format!("skipped({why})"),
    }
}

fn measured_float(m: &Measured<f64>) -> String {
    match m {
        Measured::Value(v) => format!("{v:.9}"),
        Measured::Skipped(why) => format!("skipped({why})"),
    }
}

fn fields(r: &MetricsReport) -> Vec<String> {
    let mut out = vec![
        r.t.to_string(),
        r.n_alive.to_string(),
        r.connected_shadow.to_string(),
        r.connected_live.to_string(),
        r.connectivity.as_str().to_string(),
        opt_ratio(r.max_degree_ratio_slack),
        r.degree_violations.to_string(),
        r.density_subsets.to_string(),
        r.density_violations.to_string(),
        r.density_ub_violations.to_string(),
        measured_ratio(&r.expansion_live),
        measured_ratio(&r.expansion_shadow),
        r.expansion_ok.map(|b| b.to_string()).unwrap_or_default(),
        measured_float(&r.lambda2_live),
        opt_ratio(r.max_stretch),
        r.stretch_bound.to_string(),
        r.stretch_ok.to_string(),
        r.edge_preservation_ok.to_string(),
        r.coherence_ok.to_string(),
    ];
    out.extend(r.counters.values().iter().map(u64::to_string));
    out
}

/// CSV text with a header row naming every column.
pub fn to_csv(reports: &[MetricsReport]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(columns()).expect("in-memory write");
    for r in reports {
        w.write_record(fields(r)).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output")
}

/// One JSON object per checkpoint with the same column names and renderings.
pub fn to_jsonl(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let mut obj = Map::new();
        for (name, value) in columns().into_iter().zip(fields(r)) {
            let v = match value.parse::<u64>() {
                Ok(n) if !matches!(name, "max_degree_ratio_slack" | "max_stretch") => Value::from(n),
                _ => match value.as_str() {
                    "true" => Value::Bool(true),
                    "false" => Value::Bool(false),
                    "" => Value::Null,
                    _ => Value::String(value),
                },
            };
            obj.insert(name.to_string(), v);
        }
        out.push_str(&Value::Object(obj).to_string());
        out.push('\n');
    }
    out
}

struct Row<'a> {
    index: usize,
    rec: &'a csv::StringRecord,
}

impl Row<'_> {
    fn raw(&self, i: usize) -> &str {
        self.rec.get(i).unwrap_or("")
    }

    fn err(&self, i: usize, msg: impl Into<String>) -> ReportError {
        ReportError::Field { row: self.index, column: BASE_COLUMNS[i], msg: msg.into() }
    }

    fn num<T: std::str::FromStr>(&self, i: usize) -> Result<T, ReportError> {
        self.raw(i).parse().map_err(|_| self.err(i, format!("bad number '{}'", self.raw(i))))
    }

    fn flag(&self, i: usize) -> Result<bool, ReportError> {
        self.raw(i).parse().map_err(|_| self.err(i, format!("bad boolean '{}'", self.raw(i))))
    }

    fn opt_flag(&self, i: usize) -> Result<Option<bool>, ReportError> {
        if self.raw(i).is_empty() {
            Ok(None)
        } else {
            self.flag(i).map(Some)
        }
    }

    fn opt_ratio(&self, i: usize) -> Result<Option<Rational64>, ReportError> {
        if self.raw(i).is_empty() {
            return Ok(None);
        }
        ratio::parse(self.raw(i)).map(Some).map_err(|e| self.err(i, e.to_string()))
    }

    fn skipped(&self, i: usize) -> Option<String> {
        self.raw(i).strip_prefix("skipped(").and_then(|s| s.strip_suffix(')')).map(str::to_string)
    }

    fn measured_ratio(&self, i: usize) -> Result<Measured<Rational64>, ReportError> {
        match self.skipped(i) {
            Some(why) => Ok(Measured::Skipped(why)),
            None => ratio::parse(self.raw(i)).map(Measured::Value).map_err(|e| self.err(i, e.to_string())),
        }
    }

    fn measured_float(&self, i: usize) -> Result<Measured<f64>, ReportError> {
        match self.skipped(i) {
            Some(why) => Ok(Measured::Skipped(why)),
            None => self.num(i).map(Measured::Value),
        }
    }
}

/// Parses a CSV report. At least one data row is required.
pub fn from_csv(text: &str) -> Result<Vec<MetricsReport>, ReportError> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(ReportError::Empty);
    }
    if header != columns() {
        return Err(ReportError::Header(header.join(",")));
    }
    let mut out = Vec::new();
    for (index, rec) in rd.records().enumerate() {
        let rec = rec?;
        let row = Row { index: index + 1, rec: &rec };
        let connectivity = match row.raw(4) {
            "pass" => ConnectivityVerdict::Pass,
            "vacuous" => ConnectivityVerdict::Vacuous,
            "fail" => ConnectivityVerdict::Fail,
            other => return Err(row.err(4, format!("bad verdict '{other}'"))),
        };
        let counter_values: Vec<u64> = (BASE_COLUMNS.len()..rec.len())
            .map(|i| {
                rec[i].parse().map_err(|_| ReportError::Field {
                    row: index + 1,
                    column: "counters",
                    msg: format!("bad counter '{}'", &rec[i]),
                })
            })
            .collect::<Result<_, _>>()?;
        let counters = RepairCounters::from_values(&counter_values).ok_or(ReportError::Field {
            row: index + 1,
            column: "counters",
            msg: "wrong number of counters".into(),
        })?;
        out.push(MetricsReport {
            t: row.num(0)?,
            n_alive: row.num(1)?,
            connected_shadow: row.flag(2)?,
            connected_live: row.flag(3)?,
            connectivity,
            max_degree_ratio_slack: row.opt_ratio(5)?,
            degree_violations: row.num(6)?,
            density_subsets: row.num(7)?,
            density_violations: row.num(8)?,
            density_ub_violations: row.num(9)?,
            expansion_live: row.measured_ratio(10)?,
            expansion_shadow: row.measured_ratio(11)?,
            expansion_ok: row.opt_flag(12)?,
            lambda2_live: row.measured_float(13)?,
            max_stretch: row.opt_ratio(14)?,
            stretch_bound: row.num(15)?,
            stretch_ok: row.flag(16)?,
            edge_preservation_ok: row.flag(17)?,
            coherence_ok: row.flag(18)?,
            counters,
        });
    }
    if out.is_empty() {
        return Err(ReportError::Empty);
    }
    Ok(out)
}

/// Human-readable block for one run.
pub fn summarize(name: &str, reports: &[MetricsReport]) -> String {
    let mut s = String::new();
    let first = reports.first().map_or(0, |r| r.t);
    let last = reports.last();
    let _ = writeln!(s, "== {name} ==");
    let _ = writeln!(s, "checkpoints: {} (t={}..{})", reports.len(), first, last.map_or(0, |r| r.t));
    let slack = reports.iter().filter_map(|r| r.max_degree_ratio_slack).min();
    let _ = writeln!(s, "min degree slack: {}", slack.map_or("n/a".to_string(), ratio::format));
    let worst = reports
        .iter()
        .filter_map(|r| r.max_stretch.map(|m| (m, r)))
        .max_by(|a, b| a.0.cmp(&b.0).then(b.1.t.cmp(&a.1.t)));
    match worst {
        Some((m, r)) => {
            let _ = writeln!(s, "max stretch: {} at t={} (bound {})", ratio::format(m), r.t, r.stretch_bound);
        }
        None => {
            let _ = writeln!(s, "max stretch: n/a");
        }
    }
    let traj: Vec<String> = reports
        .iter()
        .map(|r| format!("{}:{}|{}", r.t, short(&r.expansion_live), short(&r.expansion_shadow)))
        .collect();
    let _ = writeln!(s, "expansion live|shadow: {}", traj.join(" "));
    if let Some(r) = last {
        let c = &r.counters;
        let _ = writeln!(s, "merges: {} ({} clouds merged)", c.merges, c.clouds_merged);
        let _ = writeln!(
            s,
            "branches: all-black {}, primary {}, secondary {}",
            c.branch_all_black, c.branch_primary, c.branch_secondary
        );
    }
    let failing = reports.iter().filter(|r| !r.passes()).count();
    let _ = writeln!(s, "failing checkpoints: {failing}");
    s
}

fn short(m: &Measured<Rational64>) -> String {
    match m {
        Measured::Value(v) => ratio::format(*v),
        Measured::Skipped(_) => "-".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(t: u64) -> MetricsReport {
        let counters = RepairCounters { merges: 2, deletes: t, ..Default::default() };
        MetricsReport {
            t,
            n_alive: 5,
            connected_shadow: true,
            connected_live: true,
            connectivity: ConnectivityVerdict::Pass,
            max_degree_ratio_slack: Some(Rational64::from_integer(3)),
            degree_violations: 0,
            density_subsets: 104,
            density_violations: 0,
            density_ub_violations: 0,
            expansion_live: Measured::Value(Rational64::new(4, 3)),
            expansion_shadow: Measured::Skipped("n=30>20".into()),
            expansion_ok: None,
            lambda2_live: Measured::Value(1.5),
            max_stretch: Some(Rational64::new(1, 2)),
            stretch_bound: 12,
            stretch_ok: true,
            edge_preservation_ok: true,
            coherence_ok: true,
            counters,
        }
    }

    #[test]
    fn header_names_every_column() {
        let text = to_csv(&[]);
        let header = text.lines().next().unwrap();
        assert!(header.starts_with("t,n_alive,connected_shadow"));
        assert!(header.ends_with(",uncertified_builds,faults_injected"));
        assert_eq!(header.split(',').count(), BASE_COLUMNS.len() + RepairCounters::names().len());
    }

    #[test]
    fn rationals_render_exactly() {
        let text = to_csv(&[sample(10)]);
        let row = text.lines().nth(1).unwrap();
        assert!(
            row.starts_with("10,5,true,true,pass,3/1,0,104,0,0,4/3,skipped(n=30>20),,1.500000000,1/2,12,"),
            "{row}"
        );
    }

    #[test]
    fn csv_round_trip() {
        let reports = vec![sample(10), sample(20)];
        assert_eq!(from_csv(&to_csv(&reports)).unwrap(), reports);
    }

    #[test]
    fn empty_inputs_rejected() {
        assert!(matches!(from_csv(""), Err(ReportError::Empty)));
        assert!(matches!(from_csv(&to_csv(&[])), Err(ReportError::Empty)));
        assert!(matches!(from_csv("a,b\n1,2\n"), Err(ReportError::Header(_))));
    }

    #[test]
    fn jsonl_types() {
        let line = to_jsonl(&[sample(10)]);
        let v: Value = serde_json::from_str(line.trim()).unwrap();
        assert_eq!(v["t"], 10);
        assert_eq!(v["max_stretch"], "1/2");
        assert_eq!(v["max_degree_ratio_slack"], "3/1");
        assert_eq!(v["expansion_ok"], Value::Null);
        assert_eq!(v["stretch_ok"], true);
    }

    #[test]
    fn summary_block() {
        let s = summarize("run.csv", &[sample(10)]);
        assert!(s.starts_with("== run.csv ==\n"));
        assert!(s.contains("min degree slack: 3/1"));
        assert!(s.contains("max stretch: 1/2 at t=10 (bound 12)"));
        assert!(s.contains("expansion live|shadow: 10:4/3|-"));
        assert!(s.contains("merges: 2"));
    }
}
