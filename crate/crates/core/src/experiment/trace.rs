//! CSV traces: one header row, then one row per iteration.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use crate::analysis::McCurve;
use crate::solvers::SolverReport;

pub const FIXED_COLUMNS: [&str; 6] =
    ["rho", "iota", "gamma", "step_residual", "combined_residual", "error_to_reference"];

/// 17 significant digits; parsing the text returns the same double.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt(x: Option<f64>) -> String {
    x.map(format_float).unwrap_or_default()
}

/// Header for a report whose iterate (and partner) flatten to `width` columns.
pub fn header(width: usize) -> Vec<String> {
    FIXED_COLUMNS.iter().map(|s| s.to_string()).chain((0..width).map(|i| format!("x{i}"))).collect()
}

fn width(report: &SolverReport) -> usize {
    report.final_iterate.dim() + report.final_partner.as_ref().map_or(0, |p| p.dim())
}

pub fn write_csv<W: Write>(report: &SolverReport, out: W) -> io::Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(header(width(report)))?;
    for r in &report.records {
        let mut row = vec![
            r.rho.to_string(),
            opt(r.iota),
            format_float(r.gamma),
            format_float(r.step_residual),
            opt(r.combined_residual),
            opt(r.error_to_reference),
        ];
        row.extend(r.iterate.as_slice().iter().map(|x| format_float(*x)));
        if let Some(p) = &r.partner {
            row.extend(p.as_slice().iter().map(|x| format_float(*x)));
        }
        w.write_record(&row)?;
    }
    w.flush()
}

pub fn emit_csv(report: &SolverReport, path: &Path) -> io::Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    write_csv(report, &mut f)?;
    f.flush()
}

/// Monte Carlo curve as `k,mean_sq_error,standard_error`.
pub fn write_mc_csv<W: Write>(curve: &McCurve, out: W) -> io::Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["k", "mean_sq_error", "standard_error"])?;
    for p in &curve.points {
        w.write_record([p.k.to_string(), format_float(p.mean_sq_error), opt(p.standard_error)])?;
    }
    w.flush()
}
