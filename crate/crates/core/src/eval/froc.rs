use std::io::Write;
use std::path::Path;

use crate::cascade::Candidate;
use crate::ct_data::NoduleAnnotation;
use crate::error::{ensure, Error, Result};

/// One scan's ground truth with its final scored candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredScan {
    pub scan_id: String,
    pub annotations: Vec<NoduleAnnotation>,
    pub candidates: Vec<Candidate>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchResult {
    pub hits: Vec<bool>,
    pub false_positives: usize,
}

impl MatchResult {
    pub fn hit_count(&self) -> usize {
        self.hits.iter().filter(|&&h| h).count()
    }
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
}

fn inside(c: &Candidate, gt: &NoduleAnnotation) -> bool {
    distance(c.center_world, gt.center_world) <= gt.radius_mm()
}

/// Candidates scoring at least `threshold` hit every ground truth whose
/// radius contains them. A ground truth counts once however many candidates
/// hit it; candidates inside no ground truth are false positives.
pub fn match_candidates(candidates: &[Candidate], gts: &[NoduleAnnotation], threshold: f64) -> MatchResult {
    let mut hits = vec![false; gts.len()];
    let mut false_positives = 0;
    for c in candidates.iter().filter(|c| c.score() >= threshold) {
        let mut any = false;
        for (h, gt) in hits.iter_mut().zip(gts) {
            if inside(c, gt) {
                *h = true;
                any = true;
            }
        }
        if !any {
            false_positives += 1;
        }
    }
    MatchResult { hits, false_positives }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrocPoint {
    pub threshold: f64,
    pub fp_per_scan: f64,
    pub sensitivity: f64,
}

/// Operating points by descending threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct FrocCurve {
    pub points: Vec<FrocPoint>,
    pub scans: usize,
    pub ground_truths: usize,
}

/// Sweep every distinct candidate score from high to low.
///
/// Each ground truth is detected from the best score among candidates inside
/// it, and each candidate inside no ground truth adds one false positive from
/// its own score down, so the sweep is one sorted pass.
pub fn compute_froc(scans: &[ScoredScan]) -> Result<FrocCurve> {
    ensure(!scans.is_empty(), || "FROC needs at least one scan".into())?;
    let total: usize = scans.iter().map(|s| s.annotations.len()).sum();
    ensure(total > 0, || "FROC needs at least one ground-truth nodule".into())?;
    // (score, false-positive delta, hit delta)
    let mut events: Vec<(f64, usize, usize)> = Vec::new();
    for s in scans {
        for c in &s.candidates {
            let p = c.score();
            ensure(p.is_finite(), || format!("candidate score {p} in scan {}", s.scan_id))?;
            let fp = usize::from(!s.annotations.iter().any(|gt| inside(c, gt)));
            events.push((p, fp, 0));
        }
        for gt in &s.annotations {
            let best = s.candidates.iter().filter(|c| inside(c, gt)).map(Candidate::score).fold(f64::NEG_INFINITY, f64::max);
            if best.is_finite() {
                events.push((best, 0, 1));
            }
        }
    }
    events.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n = scans.len() as f64;
    let mut points = Vec::new();
    let (mut fps, mut hits) = (0usize, 0usize);
    let mut i = 0;
    while i < events.len() {
        let t = events[i].0;
        while i < events.len() && events[i].0 == t {
            fps += events[i].1;
            hits += events[i].2;
            i += 1;
        }
        points.push(FrocPoint { threshold: t, fp_per_scan: fps as f64 / n, sensitivity: hits as f64 / total as f64 });
    }
    Ok(FrocCurve { points, scans: scans.len(), ground_truths: total })
}

pub const FROC_HEADER: &str = "threshold,fp_per_scan,sensitivity";

pub fn write_froc<W: Write>(mut w: W, curve: &FrocCurve) -> Result<()> {
    let io = |e| Error::io("froc", e);
    writeln!(w, "{FROC_HEADER}").map_err(io)?;
    for p in &curve.points {
        writeln!(w, "{},{},{}", p.threshold, p.fp_per_scan, p.sensitivity).map_err(io)?;
    }
    Ok(())
}

pub fn save_froc(path: &Path, curve: &FrocCurve) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_froc(std::io::BufWriter::new(f), curve)
}
