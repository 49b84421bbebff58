use std::fs::File;
use std::io::Write;
use std::path::Path;

use super::volume::NoduleAnnotation;
use crate::error::{Error, Result};

pub const ANNOTATION_HEADER: [&str; 5] = ["seriesuid", "coordX", "coordY", "coordZ", "diameter_mm"];

/// Parse annotation rows from any reader. Columns are `x, y, z` world order;
/// centers are stored `z, y, x`.
pub fn read_annotations<R: std::io::Read>(reader: R) -> Result<Vec<NoduleAnnotation>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < 5 || header.iter().take(5).ne(ANNOTATION_HEADER) {
        return Err(Error::Parse { line: 1, msg: format!("expected header {}", ANNOTATION_HEADER.join(",")) });
    }
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |msg: String| Error::Parse { line, msg };
        if record.len() < 5 {
            return Err(bad(format!("expected 5 columns, found {}", record.len())));
        }
        let num = |i: usize| -> Result<f64> {
            let v: f64 = record[i].parse().map_err(|_| bad(format!("{} is not a number: `{}`", ANNOTATION_HEADER[i], &record[i])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(bad(format!("{} is not finite", ANNOTATION_HEADER[i])))
            }
        };
        let (x, y, z, d) = (num(1)?, num(2)?, num(3)?, num(4)?);
        if d < 0.0 {
            return Err(bad(format!("negative diameter {d}")));
        }
        let a = NoduleAnnotation::new(&record[0], [z, y, x], d).map_err(|e| bad(e.to_string()))?;
        out.push(a);
    }
    Ok(out)
}

pub fn load_annotations(path: &Path) -> Result<Vec<NoduleAnnotation>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_annotations(f)
}

pub fn write_annotations<W: Write>(writer: W, annotations: &[NoduleAnnotation]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(ANNOTATION_HEADER)?;
    for a in annotations {
        let [z, y, x] = a.center_world;
        w.write_record([a.scan_id.clone(), x.to_string(), y.to_string(), z.to_string(), a.diameter_mm.to_string()])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn save_annotations(path: &Path, annotations: &[NoduleAnnotation]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_annotations(f, annotations)
}
