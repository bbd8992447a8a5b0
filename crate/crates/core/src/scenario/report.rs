use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::coordinator::ClosedLoopTrace;
use crate::error::{Error, Result};

use super::ObjectiveReport;

/// One `(k, agent)` line of `trace.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub k: usize,
    pub agent: usize,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub theta: Vec<f64>,
    pub lambda_received: Vec<f64>,
    pub lambda_used: Vec<f64>,
    pub horizon_cost: f64,
    /// Absent when detection did not run for this agent and step.
    pub e_val: Option<f64>,
    pub flag: bool,
    pub iterations: usize,
    pub converged: bool,
}

pub fn trace_rows(trace: &ClosedLoopTrace) -> Vec<TraceRow> {
    let mut rows = Vec::new();
    for step in &trace.steps {
        for (i, a) in step.agents.iter().enumerate() {
            rows.push(TraceRow {
                k: step.k,
                agent: i,
                x: a.x.iter().copied().collect(),
                u: a.u.iter().copied().collect(),
                y: a.y.iter().copied().collect(),
                theta: a.theta.iter().copied().collect(),
                lambda_received: a.lambda_received.iter().copied().collect(),
                lambda_used: a.lambda_used.iter().copied().collect(),
                horizon_cost: a.horizon_cost,
                e_val: a.detection.as_ref().map(|d| d.e_val),
                flag: a.detection.as_ref().is_some_and(|d| d.flag),
                iterations: step.iterations,
                converged: step.converged,
            });
        }
    }
    rows
}

/// 17 significant digits, enough to round-trip any `f64`.
fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

const VECTOR_COLUMNS: [&str; 6] = ["x", "u", "y", "theta", "lambda_recv", "lambda_used"];

fn header(row: &TraceRow) -> Vec<String> {
    let lens = [
        row.x.len(),
        row.u.len(),
        row.y.len(),
        row.theta.len(),
        row.lambda_received.len(),
        row.lambda_used.len(),
    ];
    let mut h = vec!["k".to_string(), "agent".to_string()];
    for (name, n) in VECTOR_COLUMNS.iter().zip(lens) {
        h.extend((0..n).map(|j| format!("{name}_{j}")));
    }
    h.extend(
        ["horizon_cost", "e_val", "flag", "iterations", "converged"]
            .iter()
            .map(|s| s.to_string()),
    );
    h
}

fn record(row: &TraceRow) -> Vec<String> {
    let mut r = vec![row.k.to_string(), row.agent.to_string()];
    for v in [
        &row.x,
        &row.u,
        &row.y,
        &row.theta,
        &row.lambda_received,
        &row.lambda_used,
    ] {
        r.extend(v.iter().map(|&x| fmt_f64(x)));
    }
    r.push(fmt_f64(row.horizon_cost));
    r.push(row.e_val.map(fmt_f64).unwrap_or_default());
    r.push(u8::from(row.flag).to_string());
    r.push(row.iterations.to_string());
    r.push(u8::from(row.converged).to_string());
    r
}

fn csv_error(path: &Path, source: csv::Error) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_trace_csv(path: &Path, trace: &ClosedLoopTrace) -> Result<()> {
    let rows = trace_rows(trace);
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    if let Some(first) = rows.first() {
        w.write_record(header(first))
            .map_err(|e| csv_error(path, e))?;
    }
    for row in &rows {
        w.write_record(record(row))
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_field<T: std::str::FromStr>(
    path: &Path,
    line: usize,
    column: &str,
    text: &str,
) -> Result<T> {
    text.parse().map_err(|_| {
        Error::Report(format!(
            "{}: line {line}: column `{column}` has unparsable value `{text}`",
            path.display()
        ))
    })
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (n, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = n + 2;
        let mut row = TraceRow {
            k: 0,
            agent: 0,
            x: vec![],
            u: vec![],
            y: vec![],
            theta: vec![],
            lambda_received: vec![],
            lambda_used: vec![],
            horizon_cost: 0.0,
            e_val: None,
            flag: false,
            iterations: 0,
            converged: false,
        };
        for (name, text) in headers.iter().zip(rec.iter()) {
            let prefix = name
                .rsplit_once('_')
                .map(|(p, idx)| (p, idx.parse::<usize>().is_ok()));
            let target = match prefix {
                Some(("x", true)) => Some(&mut row.x),
                Some(("u", true)) => Some(&mut row.u),
                Some(("y", true)) => Some(&mut row.y),
                Some(("theta", true)) => Some(&mut row.theta),
                Some(("lambda_recv", true)) => Some(&mut row.lambda_received),
                Some(("lambda_used", true)) => Some(&mut row.lambda_used),
                _ => None,
            };
            if let Some(v) = target {
                v.push(parse_field(path, line, name, text)?);
                continue;
            }
            match name.as_str() {
                "k" => row.k = parse_field(path, line, name, text)?,
                "agent" => row.agent = parse_field(path, line, name, text)?,
                "horizon_cost" => row.horizon_cost = parse_field(path, line, name, text)?,
                "e_val" if text.is_empty() => row.e_val = None,
                "e_val" => row.e_val = Some(parse_field(path, line, name, text)?),
                "flag" => row.flag = parse_field::<u8>(path, line, name, text)? == 1,
                "iterations" => row.iterations = parse_field(path, line, name, text)?,
                "converged" => row.converged = parse_field::<u8>(path, line, name, text)? == 1,
                other => {
                    return Err(Error::Report(format!(
                        "{}: unknown column `{other}`",
                        path.display()
                    )))
                }
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

fn agent_label(i: usize) -> String {
    const ROMAN: [&str; 10] = ["I", "II", "III", "IV", "V", "VI", "VII", "VIII", "IX", "X"];
    ROMAN
        .get(i)
        .map_or_else(|| (i + 1).to_string(), |s| s.to_string())
}

pub fn summary_text(trace: &ClosedLoopTrace, report: &ObjectiveReport, title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Scenario: {title}");
    let _ = writeln!(s, "Steps: {}", trace.steps.len());
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:<8} {:>24} {:>24} {:>14}",
        "Agent", "J", "J nominal", "% error"
    );
    let fmt_opt =
        |v: Option<f64>, prec: usize| v.map_or("-".to_string(), |x| format!("{x:.prec$}"));
    for (i, &j) in report.per_agent.iter().enumerate() {
        let base = report.baseline_per_agent.as_ref().map(|b| b[i]);
        let pe = report.percent_error_per_agent.as_ref().map(|p| p[i]);
        let _ = writeln!(
            s,
            "{:<8} {:>24.6} {:>24} {:>14}",
            agent_label(i),
            j,
            fmt_opt(base, 6),
            fmt_opt(pe, 6)
        );
    }
    let _ = writeln!(
        s,
        "{:<8} {:>24.6} {:>24} {:>14}",
        "Global",
        report.global,
        fmt_opt(report.baseline_global, 6),
        fmt_opt(report.percent_error_global, 6)
    );
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<8} {:>14} {:>14}", "Agent", "flagged steps", "max E");
    for i in 0..trace.n_agents() {
        let detections: Vec<_> = trace
            .steps
            .iter()
            .filter_map(|st| st.agents[i].detection.as_ref())
            .collect();
        let flagged = detections.iter().filter(|d| d.flag).count();
        let max_e = detections
            .iter()
            .map(|d| d.e_val)
            .fold(None, |m: Option<f64>, e| Some(m.map_or(e, |m| m.max(e))));
        let _ = writeln!(
            s,
            "{:<8} {:>14} {:>14}",
            agent_label(i),
            flagged,
            max_e.map_or("-".to_string(), |e| format!("{e:.3e}"))
        );
    }
    let unconverged = trace.steps.iter().filter(|st| !st.converged).count();
    let warnings: usize = trace.steps.iter().map(|st| st.warnings.len()).sum();
    let _ = writeln!(s);
    let _ = writeln!(s, "Unconverged negotiations: {unconverged}");
    let _ = writeln!(s, "Warnings: {warnings}");
    s
}

/// Writes `trace.csv`, `objectives.json` and `summary.txt` into `out_dir`.
pub fn emit_report(
    trace: &ClosedLoopTrace,
    report: &ObjectiveReport,
    title: &str,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| Error::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let trace_path = out_dir.join("trace.csv");
    write_trace_csv(&trace_path, trace)?;
    let json_path = out_dir.join("objectives.json");
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Report(e.to_string()))?;
    fs::write(&json_path, json + "\n").map_err(io(&json_path))?;
    let summary_path = out_dir.join("summary.txt");
    fs::write(&summary_path, summary_text(trace, report, title)).map_err(io(&summary_path))?;
    Ok(vec![trace_path, json_path, summary_path])
}
