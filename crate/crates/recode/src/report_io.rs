//! Evaluation reports as JSON (everything) and CSV (one row per sample),
//! plus the training loss history as CSV.

use std::fs;
use std::path::Path;

use recode_core::eval::EvalReport;
use recode_core::train::StepRecord;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn report_json(report: &EvalReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes") + "\n"
}

/// The report with its environment block removed, for reproducibility checks.
pub fn report_body_json(report: &EvalReport) -> String {
    let mut v = serde_json::to_value(report).expect("report serializes");
    if let Some(obj) = v.as_object_mut() {
        obj.remove("environment");
    }
    serde_json::to_string_pretty(&v).expect("report serializes")
}

#[derive(Serialize)]
struct CsvRow<'a> {
    schema_version: u32,
    id: &'a str,
    task: &'a str,
    excluded: bool,
    exact_match: Option<bool>,
    edit_sim: Option<f64>,
    sem_sim: Option<f64>,
    reexec: Option<u8>,
    reexec_stage: Option<&'a str>,
    reference_nll: Option<f64>,
    reference_tokens: Option<usize>,
    error: Option<&'a str>,
    prediction: Option<&'a str>,
}

pub fn report_csv(report: &EvalReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &report.records {
        w.serialize(CsvRow {
            schema_version: report.schema_version,
            id: &r.id,
            task: r.task.tag(),
            excluded: r.excluded,
            exact_match: r.exact_match,
            edit_sim: r.edit_sim,
            sem_sim: r.sem_sim,
            reexec: r.reexec,
            reexec_stage: r.reexec_stage.map(|s| s.tag()),
            reference_nll: r.reference_nll,
            reference_tokens: r.reference_tokens,
            error: r.error.as_deref(),
            prediction: r.prediction.as_deref(),
        })
        .expect("row serializes");
    }
    if report.records.is_empty() {
        w.write_record([
            "schema_version",
            "id",
            "task",
            "excluded",
            "exact_match",
            "edit_sim",
            "sem_sim",
            "reexec",
            "reexec_stage",
            "reference_nll",
            "reference_tokens",
            "error",
            "prediction",
        ])
        .expect("header serializes");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is UTF-8")
}

/// Writes `<prefix>.json` and `<prefix>.csv`; returns both paths.
pub fn write_report(prefix: &Path, report: &EvalReport) -> Result<[std::path::PathBuf; 2]> {
    let json = prefix.with_extension("json");
    let csv = prefix.with_extension("csv");
    fs::write(&json, report_json(report)).map_err(|e| Error::io(&json, e))?;
    fs::write(&csv, report_csv(report)).map_err(|e| Error::io(&csv, e))?;
    Ok([json, csv])
}

pub fn loss_csv(history: &[StepRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "loss", "lr"])
        .expect("header serializes");
    for r in history {
        w.write_record([r.step.to_string(), r.loss.to_string(), r.lr.to_string()])
            .expect("row serializes");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is UTF-8")
}
