//! Plain-text tables and CSV export for evaluation results.

use std::fmt::Write as _;
use std::path::Path;

use detkit_core::evalmap::ScatterRow;
use detkit_core::toydet::{AblationTable, AblationVariant};
use detkit_core::EvalReport;

use crate::persist::{write_atomic, PersistError};

pub const SCATTER_HEADER: &str = "confidence,iou_eval,iou_truth,category_id";
pub const SWEEP_HEADER: &str = "alpha,ap,ap50,ap60,ap70,ap75,ap80,ap90";
pub const ABLATION_HEADER: &str = "seed,variant,best_alpha,ap,ap50,ap60,ap70,ap75,ap80,ap90";

/// One-line metric summary in the usual column order.
pub fn report_line(report: &EvalReport) -> String {
    format!(
        "AP {:.4}  AP50 {:.4}  AP60 {:.4}  AP70 {:.4}  AP75 {:.4}  AP80 {:.4}  AP90 {:.4}  APs {:.4}  APm {:.4}  APl {:.4}",
        report.ap,
        report.ap50,
        report.ap60,
        report.ap70,
        report.ap75,
        report.ap80,
        report.ap90,
        report.ap_small,
        report.ap_medium,
        report.ap_large,
    )
}

fn metric_cells(report: &EvalReport) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        report.ap, report.ap50, report.ap60, report.ap70, report.ap75, report.ap80, report.ap90
    )
}

pub fn write_scatter_csv(path: &Path, rows: &[ScatterRow]) -> Result<(), PersistError> {
    let mut out = String::from(SCATTER_HEADER);
    out.push('\n');
    for row in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            row.confidence, row.iou_eval, row.iou_truth, row.category_id
        );
    }
    write_atomic(path, out.as_bytes())
}

/// One row per fusion exponent, Table-style column layout.
pub fn write_sweep_csv(path: &Path, rows: &[(f64, EvalReport)]) -> Result<(), PersistError> {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for (alpha, report) in rows {
        let _ = writeln!(out, "{alpha},{}", metric_cells(report));
    }
    write_atomic(path, out.as_bytes())
}

pub fn write_ablation_csv(path: &Path, table: &AblationTable) -> Result<(), PersistError> {
    write_atomic(path, ablation_csv_string(table).as_bytes())
}

pub fn ablation_csv_string(table: &AblationTable) -> String {
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for row in &table.rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            row.seed,
            row.variant.label(),
            row.best_alpha,
            metric_cells(&row.report)
        );
    }
    out
}

/// Slim view of one ablation CSV row, for parsing the export back.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationCsvRow {
    pub seed: u64,
    pub variant: String,
    pub best_alpha: f64,
    pub metrics: [f64; 7],
}

pub fn parse_ablation_csv(text: &str) -> Result<Vec<AblationCsvRow>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header == ABLATION_HEADER => {}
        other => return Err(format!("unexpected header {other:?}")),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 10 {
                return Err(format!("expected 10 cells, got {}: {line}", cells.len()));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| format!("bad number {s}: {e}"));
            let mut metrics = [0.0; 7];
            for (slot, cell) in metrics.iter_mut().zip(&cells[3..]) {
                *slot = num(cell)?;
            }
            Ok(AblationCsvRow {
                seed: cells[0].parse().map_err(|e| format!("bad seed: {e}"))?,
                variant: cells[1].to_string(),
                best_alpha: num(cells[2])?,
                metrics,
            })
        })
        .collect()
}

/// Mean APs and the pairwise one-sided sign tests of the ablation.
pub fn ablation_summary(table: &AblationTable) -> String {
    let mut out = String::new();
    for variant in AblationVariant::ALL {
        let _ = writeln!(
            out,
            "mean AP {:<18} {:.4}",
            variant.label(),
            table.mean_ap(variant)
        );
    }
    for (a, b) in [
        (AblationVariant::IouHeadDetached, AblationVariant::Baseline),
        (AblationVariant::IouHeadPropagated, AblationVariant::Baseline),
        (AblationVariant::IouHeadPropagated, AblationVariant::IouHeadDetached),
    ] {
        let (wins, losses, p) = table.sign_test(a, b);
        let _ = writeln!(
            out,
            "sign test {} > {}: {wins} wins / {losses} losses, one-sided p = {p:.4}",
            a.label(),
            b.label()
        );
    }
    out
}
