//! CSV outputs: training log, evaluation report, per-query detail and the two
//! ablation tables. Floats use the shortest decimal form that round-trips.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use divnorm_core::retrieval::EvalReport;
use divnorm_core::trainer::EpochLog;

use crate::error::{CliError, Result};

pub const TRAIN_LOG_HEADER: [&str; 6] = ["epoch", "loss_total", "loss_id", "loss_c", "mean_w_c", "lr"];
pub const REPORT_HEADER: [&str; 7] = ["protocol", "strategy", "mAP", "rank1", "rank5", "rank10", "n_queries"];
pub const PER_QUERY_HEADER: [&str; 3] = ["query_sample_id", "AP", "first_match_rank"];

/// One row of the query-strategy ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct SeededReport {
    pub seed: u64,
    pub report: EvalReport,
}

/// One row of the drop-clothes ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct DropClothesRow {
    pub seed: u64,
    pub keep_fraction: f64,
    pub report: EvalReport,
}

fn write_csv<S: AsRef<str>>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<S>>) -> Result<()> {
    let write_err = |e: std::io::Error| CliError::Write { path: path.to_path_buf(), source: e };
    let file = File::create(path).map_err(write_err)?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file);
    let csv_err = |e: csv::Error| CliError::Write { path: path.to_path_buf(), source: e.into() };
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row.iter().map(|s| s.as_ref())).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| write_err(e.into_error()))?.flush().map_err(write_err)
}

fn metrics(r: &EvalReport) -> [String; 5] {
    [
        r.map.to_string(),
        r.rank(1).to_string(),
        r.rank(5).to_string(),
        r.rank(10).to_string(),
        r.n_queries.to_string(),
    ]
}

pub fn write_train_log(logs: &[EpochLog], path: &Path) -> Result<()> {
    let rows = logs.iter().map(|l| {
        vec![
            l.epoch.to_string(),
            l.loss_total.to_string(),
            l.loss_id.to_string(),
            l.loss_c.to_string(),
            l.mean_w_c.to_string(),
            l.lr.to_string(),
        ]
    });
    write_csv(path, &TRAIN_LOG_HEADER, rows)
}

pub fn write_reports(reports: &[EvalReport], path: &Path) -> Result<()> {
    let rows = reports.iter().map(|r| {
        let mut row = vec![r.protocol.name().to_string(), r.strategy.name().to_string()];
        row.extend(metrics(r));
        row
    });
    write_csv(path, &REPORT_HEADER, rows)
}

pub fn write_per_query(report: &EvalReport, path: &Path) -> Result<()> {
    let rows = report.per_query.iter().map(|q| {
        vec![
            q.query_sample_id.to_string(),
            q.result.average_precision.to_string(),
            q.result.first_match_rank.to_string(),
        ]
    });
    write_csv(path, &PER_QUERY_HEADER, rows)
}

pub fn write_query_strategy(rows: &[SeededReport], path: &Path) -> Result<()> {
    let mut header = vec!["seed"];
    header.extend(REPORT_HEADER);
    let rows = rows.iter().map(|s| {
        let mut row = vec![s.seed.to_string(), s.report.protocol.name().into(), s.report.strategy.name().into()];
        row.extend(metrics(&s.report));
        row
    });
    write_csv(path, &header, rows)
}

pub fn write_drop_clothes(rows: &[DropClothesRow], path: &Path) -> Result<()> {
    let mut header = vec!["seed", "keep_fraction"];
    header.extend(REPORT_HEADER);
    let rows = rows.iter().map(|d| {
        let mut row = vec![
            d.seed.to_string(),
            d.keep_fraction.to_string(),
            d.report.protocol.name().into(),
            d.report.strategy.name().into(),
        ];
        row.extend(metrics(&d.report));
        row
    });
    write_csv(path, &header, rows)
}
