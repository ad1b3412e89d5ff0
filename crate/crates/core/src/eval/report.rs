//! JSON and CSV report files.
//!
//! CSV columns, in order:
//! `kind,index,label,config_hash,num_windows,wall_clock_s,min_ade,min_fde,baseline_ade,baseline_fde`.
//! The first row has `kind = summary`; each further row is `kind = window`
//! with only `index`, `min_ade` and `min_fde` filled.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EvalError, MetricsReport, Result, WindowMetrics};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl ReportFormat {
    /// `.csv` selects CSV, anything else JSON.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => ReportFormat::Csv,
            _ => ReportFormat::Json,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    kind: String,
    index: Option<usize>,
    label: Option<String>,
    config_hash: Option<String>,
    num_windows: Option<usize>,
    wall_clock_s: Option<f64>,
    min_ade: f64,
    min_fde: f64,
    baseline_ade: Option<f64>,
    baseline_fde: Option<f64>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, msg: impl ToString) -> EvalError {
    EvalError::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

fn to_csv(report: &MetricsReport, path: &Path) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let summary = CsvRow {
        kind: "summary".into(),
        index: None,
        label: Some(report.label.clone()),
        config_hash: Some(report.config_hash.clone()),
        num_windows: Some(report.num_windows),
        wall_clock_s: Some(report.wall_clock_s),
        min_ade: report.min_ade,
        min_fde: report.min_fde,
        baseline_ade: Some(report.baseline_ade),
        baseline_fde: Some(report.baseline_fde),
    };
    w.serialize(summary).map_err(|e| format_err(path, e))?;
    for win in &report.windows {
        w.serialize(CsvRow {
            kind: "window".into(),
            index: Some(win.index),
            label: None,
            config_hash: None,
            num_windows: None,
            wall_clock_s: None,
            min_ade: win.min_ade,
            min_fde: win.min_fde,
            baseline_ade: None,
            baseline_fde: None,
        })
        .map_err(|e| format_err(path, e))?;
    }
    w.into_inner().map_err(|e| format_err(path, e))
}

fn from_csv(bytes: &[u8], path: &Path) -> Result<MetricsReport> {
    let mut rows = csv::Reader::from_reader(bytes).into_deserialize::<CsvRow>();
    let summary = rows
        .next()
        .ok_or_else(|| format_err(path, "no summary row"))?
        .map_err(|e| format_err(path, e))?;
    let missing = |field: &str| format_err(path, format!("summary row lacks {field}"));
    if summary.kind != "summary" {
        return Err(format_err(path, "first row must be the summary"));
    }
    let mut windows = Vec::new();
    for row in rows {
        let row = row.map_err(|e| format_err(path, e))?;
        windows.push(WindowMetrics {
            index: row
                .index
                .ok_or_else(|| format_err(path, "window row lacks index"))?,
            min_ade: row.min_ade,
            min_fde: row.min_fde,
        });
    }
    Ok(MetricsReport {
        label: summary.label.unwrap_or_default(),
        min_ade: summary.min_ade,
        min_fde: summary.min_fde,
        num_windows: summary.num_windows.ok_or_else(|| missing("num_windows"))?,
        config_hash: summary.config_hash.unwrap_or_default(),
        wall_clock_s: summary
            .wall_clock_s
            .ok_or_else(|| missing("wall_clock_s"))?,
        baseline_ade: summary
            .baseline_ade
            .ok_or_else(|| missing("baseline_ade"))?,
        baseline_fde: summary
            .baseline_fde
            .ok_or_else(|| missing("baseline_fde"))?,
        windows,
    })
}

pub fn emit_report(report: &MetricsReport, path: &Path, format: ReportFormat) -> Result<()> {
    let bytes = match format {
        ReportFormat::Json => serde_json::to_vec_pretty(report).map_err(|e| format_err(path, e))?,
        ReportFormat::Csv => to_csv(report, path)?,
    };
    std::fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_report(path: &Path, format: ReportFormat) -> Result<MetricsReport> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    match format {
        ReportFormat::Json => serde_json::from_slice(&bytes).map_err(|e| format_err(path, e)),
        ReportFormat::Csv => from_csv(&bytes, path),
    }
}
