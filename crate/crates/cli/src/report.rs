//! Structured-text outputs: CSV files and aligned tables. All float
//! formatting uses the shortest round-trip representation so identical runs
//! produce byte-identical files.

use std::fmt::Write as _;

/// Renders rows as CSV with a header line.
pub fn csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Renders rows as a right-aligned fixed-width table.
pub fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate().take(cols) {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    for (i, h) in header.iter().enumerate() {
        let _ = write!(out, "{:>width$}", h, width = widths[i] + 2);
    }
    out.push('\n');
    for row in rows {
        for (i, cell) in row.iter().enumerate().take(cols) {
            let _ = write!(out, "{:>width$}", cell, width = widths[i] + 2);
        }
        out.push('\n');
    }
    out
}

pub fn f(v: f64) -> String {
    // Flush negative zero so exact zeros print uniformly.
    let v = if v == 0.0 { 0.0 } else { v };
    format!("{v}")
}

pub fn f6(v: f64) -> String {
    let v = if v == 0.0 { 0.0 } else { v };
    format!("{v:.6}")
}
