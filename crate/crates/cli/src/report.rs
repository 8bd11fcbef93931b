//! CSV and JSON-lines report writers.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use radformer_core::export::pm;
use radformer_core::metrics::{summarize_reports, MetricsReport, Summary, TABLE_COLUMNS};
use radformer_core::roi::Binarization;
use radformer_core::trainer::{strategy_summary, EpochLog, FoldResult};

use crate::commands::CliResult;

pub const ROI_COLUMNS: [&str; 7] = ["method", "mIoU", "mIntersection", "ROI_Area/Img_Area", "Acc.", "Spec.", "Sens."];

fn cell(s: Option<Summary>) -> String {
    s.map_or_else(|| "n/a".into(), |s| pm(s.mean, s.sd))
}

fn value(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.6}"))
}

pub fn write_logs(path: &Path, logs: &[EpochLog]) -> CliResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for l in logs {
        writeln!(w, "{}", serde_json::to_string(l)?)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per fold with the raw classification columns.
pub fn write_fold_csv(path: &Path, results: &[FoldResult]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["fold"];
    header.extend(TABLE_COLUMNS);
    w.write_record(&header)?;
    for r in results {
        let mut row = vec![r.fold.to_string()];
        row.extend(r.report.row().into_iter().map(value));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Classification columns as `mean±sd` over folds.
pub fn write_summary_csv(path: &Path, label: &str, reports: &[MetricsReport]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["method"];
    header.extend(TABLE_COLUMNS);
    w.write_record(&header)?;
    let mut row = vec![label.to_string()];
    row.extend(summarize_reports(reports).into_iter().map(cell));
    w.write_record(&row)?;
    w.flush()?;
    Ok(())
}

/// ROI columns plus accuracy, specificity and sensitivity per strategy.
pub fn write_roi_table(path: &Path, results: &[FoldResult], strategies: &[Binarization]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(ROI_COLUMNS)?;
    for &s in strategies {
        let sum = strategy_summary(results, s);
        let mut row = vec![s.display_name().to_string()];
        row.extend(sum[..6].iter().copied().map(cell));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Per fold and strategy: ROI means and the classification columns.
pub fn write_roi_folds(path: &Path, results: &[FoldResult]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["fold", "strategy", "miou", "mintersection", "area_fraction"];
    header.extend(TABLE_COLUMNS);
    w.write_record(&header)?;
    for r in results {
        for s in &r.strategies {
            let mut row = vec![r.fold.to_string(), s.strategy.to_string()];
            row.extend([s.roi.map(|m| m.iou), s.roi.map(|m| m.intersection_fraction), s.roi.map(|m| m.area_fraction)].map(value));
            row.extend(s.report.row().into_iter().map(value));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}
