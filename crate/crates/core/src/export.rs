//! Portable graymap, CSV and JSON writers for reports.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::roi::{BinaryMask, HeatMap};

/// Binary (P5) portable graymap.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    Ok(())
}

/// Scales nonnegative values so the maximum maps to 255.
pub fn to_gray(values: &[f64]) -> Vec<u8> {
    let max = values.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return vec![0; values.len()];
    }
    values.iter().map(|&v| ((v.max(0.0) / max) * 255.0).round() as u8).collect()
}

pub fn write_heatmap_pgm(path: &Path, h: &HeatMap) -> Result<()> {
    write_pgm(path, h.width, h.height, &to_gray(&h.values))
}

pub fn write_mask_pgm(path: &Path, m: &BinaryMask) -> Result<()> {
    let px: Vec<u8> = m.cells.iter().map(|&c| if c { 255 } else { 0 }).collect();
    write_pgm(path, m.width, m.height, &px)
}

/// Grid as CSV, one row per line.
pub fn write_grid_csv(path: &Path, width: usize, values: &[f64]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for row in values.chunks(width) {
        w.write_record(row.iter().map(|v| format!("{v}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// `mean±sd` with three decimals.
pub fn pm(mean: f64, sd: f64) -> String {
    format!("{mean:.3}±{sd:.3}")
}
