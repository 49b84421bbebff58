use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use super::froc::FrocCurve;
use crate::error::{ensure, Error, Result};

pub const FP_RATES: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

const RATE_LABELS: [&str; 7] = ["0.125", "0.25", "0.5", "1", "2", "4", "8"];

/// Sensitivities at the seven false-positive rates and their mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CpmReport {
    pub sensitivities: [f64; 7],
    pub cpm: f64,
}

impl CpmReport {
    pub fn from_sensitivities(sensitivities: [f64; 7]) -> Self {
        CpmReport { sensitivities, cpm: sensitivities.iter().sum::<f64>() / 7.0 }
    }

    /// Table text: one header line, one row per report.
    pub fn table(rows: &[(&str, &CpmReport)]) -> String {
        let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
        let mut out = String::new();
        let _ = writeln!(out, "# sensitivity by linear interpolation of the FROC at each rate, clamped at the curve ends");
        let _ = write!(out, "{:<width$}", "method");
        for l in RATE_LABELS {
            let _ = write!(out, "  {l:>6}");
        }
        let _ = writeln!(out, "  {:>6}", "CPM");
        for (name, r) in rows {
            let _ = write!(out, "{name:<width$}");
            for s in r.sensitivities {
                let _ = write!(out, "  {s:>6.3}");
            }
            let _ = writeln!(out, "  {:>6.3}", r.cpm);
        }
        out
    }

    pub fn save(&self, path: &Path, name: &str) -> Result<()> {
        std::fs::write(path, CpmReport::table(&[(name, self)])).map_err(|e| Error::io(path, e))
    }
}

/// Sensitivity at `fp` by linear interpolation between the neighbouring
/// operating points. Points sharing a false-positive rate collapse to their
/// best sensitivity; rates outside the curve take the nearest end.
pub fn sensitivity_at(curve: &FrocCurve, fp: f64) -> Result<f64> {
    ensure(!curve.points.is_empty(), || "empty FROC curve".into())?;
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(curve.points.len());
    let mut sorted: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.fp_per_scan, p.sensitivity)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    for (x, y) in sorted {
        match pts.last_mut() {
            Some(last) if last.0 == x => last.1 = last.1.max(y),
            _ => pts.push((x, y)),
        }
    }
    let (first, last) = (pts[0], pts[pts.len() - 1]);
    if fp <= first.0 {
        return Ok(first.1);
    }
    if fp >= last.0 {
        return Ok(last.1);
    }
    let k = pts.partition_point(|p| p.0 <= fp);
    let ((x0, y0), (x1, y1)) = (pts[k - 1], pts[k]);
    Ok(y0 + (y1 - y0) * (fp - x0) / (x1 - x0))
}

pub fn compute_cpm(curve: &FrocCurve) -> Result<CpmReport> {
    let mut s = [0.0; 7];
    for (v, &fp) in s.iter_mut().zip(&FP_RATES) {
        *v = sensitivity_at(curve, fp)?;
    }
    Ok(CpmReport::from_sensitivities(s))
}

pub const ABLATION_HEADER: &str = "method,0.125,0.25,0.5,1,2,4,8,CPM";

/// One row per configuration: the seven sensitivities and the CPM.
pub fn write_ablation<W: Write>(mut w: W, rows: &[(String, CpmReport)]) -> Result<()> {
    let io = |e| Error::io("ablation", e);
    writeln!(w, "{ABLATION_HEADER}").map_err(io)?;
    for (name, r) in rows {
        let cells: Vec<String> = r.sensitivities.iter().chain([&r.cpm]).map(|v| format!("{v:.4}")).collect();
        writeln!(w, "{name},{}", cells.join(",")).map_err(io)?;
    }
    Ok(())
}

pub fn save_ablation(path: &Path, rows: &[(String, CpmReport)]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_ablation(std::io::BufWriter::new(f), rows)
}
