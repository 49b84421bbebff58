use std::io::{Read, Write};
use std::path::Path;

use super::components::{centroid, label_components};
use super::passes::SegmentationMap;
use crate::ct_data::{Geometry, Triple};
use crate::error::{Error, Result};
use crate::Scalar;

/// A suspected nodule: centroid of a segmented component.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub scan_id: String,
    /// World millimetres, `(z, y, x)`.
    pub center_world: Triple,
    pub diameter_mm: f64,
    pub seg_score: f64,
    pub clf_prob: Option<f64>,
}

impl Candidate {
    /// Score used for FROC ranking: classifier probability when present.
    pub fn score(&self) -> f64 {
        self.clf_prob.unwrap_or(self.seg_score)
    }
}

/// Diameter of the sphere with `voxels` unit voxels, scaled by the mean
/// spacing.
pub fn equivalent_diameter(voxels: usize, mean_spacing: f64) -> f64 {
    2.0 * (3.0 * voxels as f64 / (4.0 * std::f64::consts::PI)).cbrt() * mean_spacing
}

/// One candidate per 26-connected component of `map.mask`.
pub fn extract_candidates<T: Scalar>(map: &SegmentationMap<T>, geometry: &Geometry) -> Result<Vec<Candidate>> {
    if map.mask.dims != geometry.dims {
        return Err(Error::Invalid(format!("mask dims {:?} vs geometry {:?}", map.mask.dims, geometry.dims)));
    }
    let spacing = geometry.mean_spacing();
    Ok(label_components(&map.mask.data, geometry.dims)
        .into_iter()
        .map(|comp| {
            let c = centroid(&comp, geometry.dims);
            let score = comp.iter().map(|&i| map.prob[i].as_f64()).sum::<f64>() / comp.len() as f64;
            Candidate {
                scan_id: map.mask.scan_id.clone(),
                center_world: geometry.voxel_to_world(c),
                diameter_mm: equivalent_diameter(comp.len(), spacing),
                seg_score: score.clamp(0.0, 1.0),
                clf_prob: None,
            }
        })
        .collect())
}

pub const CANDIDATE_HEADER: [&str; 7] = ["seriesuid", "coordX", "coordY", "coordZ", "diameter_mm", "seg_score", "clf_prob"];

/// CSV in annotation order (x, y, z); the `clf_prob` column is written only
/// when every candidate has one.
pub fn write_candidates<W: Write>(writer: W, candidates: &[Candidate]) -> Result<()> {
    let with_prob = !candidates.is_empty() && candidates.iter().all(|c| c.clf_prob.is_some());
    let cols = if with_prob { 7 } else { 6 };
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(&CANDIDATE_HEADER[..cols])?;
    for c in candidates {
        let [z, y, x] = c.center_world;
        let mut rec = vec![c.scan_id.clone(), x.to_string(), y.to_string(), z.to_string(), c.diameter_mm.to_string(), c.seg_score.to_string()];
        if let Some(p) = c.clf_prob.filter(|_| with_prob) {
            rec.push(p.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn save_candidates(path: &Path, candidates: &[Candidate]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_candidates(std::io::BufWriter::new(f), candidates)
}

pub fn read_candidates<R: Read>(reader: R) -> Result<Vec<Candidate>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < 6 || header.iter().zip(CANDIDATE_HEADER).any(|(a, b)| a != b) {
        return Err(Error::Parse { line: 1, msg: format!("candidate header {:?}", header.iter().collect::<Vec<_>>()) });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |i: usize| -> Result<f64> {
            let s = rec.get(i).ok_or_else(|| Error::Parse { line, msg: format!("missing column {i}") })?;
            s.parse::<f64>().map_err(|_| Error::Parse { line, msg: format!("`{s}` is not a number") })
        };
        let clf_prob = match rec.get(6) {
            Some(s) if !s.is_empty() => Some(num(6)?),
            _ => None,
        };
        out.push(Candidate {
            scan_id: rec[0].to_string(),
            center_world: [num(3)?, num(2)?, num(1)?],
            diameter_mm: num(4)?,
            seg_score: num(5)?,
            clf_prob,
        });
    }
    Ok(out)
}

pub fn load_candidates(path: &Path) -> Result<Vec<Candidate>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_candidates(f)
}
