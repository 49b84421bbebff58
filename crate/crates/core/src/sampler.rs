//! Edge-weighted selection of segmentation training patch centers.
//!
//! Sampling works per nodule and per axial slice. A slice is split into the
//! nodule itself (`P`), a high-correlation background ring around it (`HB`)
//! and everything else (`LB`). Each class gets its own probability field:
//!
//! * nodule: `exp(-d_E / r)`, with `d_E` the in-plane distance to the
//!   nodule edge and `r` the radius in voxels, so edge voxels are favoured;
//! * high background: `(I + eps) exp(-d_E / r)`, favouring bright voxels
//!   near the nodule;
//! * low background: `(I + eps) d_c`, favouring bright voxels far from the
//!   nodule center `c`.
//!
//! The printed formulas carry `exp(+d/r)`; the text says closer voxels get
//! larger weights, and the negative exponent is what is implemented here.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::ct_data::{rasterize_nodule, NoduleAnnotation, NormalizedVolume};
use crate::error::{ensure, Error, Result};
use crate::Scalar;

/// Added to normalized intensities so dark voxels keep some mass.
pub const INTENSITY_EPS: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SampleClass {
    Nodule,
    HighBg,
    LowBg,
}

impl SampleClass {
    pub const ALL: [SampleClass; 3] = [SampleClass::Nodule, SampleClass::HighBg, SampleClass::LowBg];

    pub fn name(self) -> &'static str {
        match self {
            SampleClass::Nodule => "nodule",
            SampleClass::HighBg => "high_bg",
            SampleClass::LowBg => "low_bg",
        }
    }
}

impl fmt::Display for SampleClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SampleClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SampleClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown sample class `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchSpec {
    /// In-plane side length.
    pub side: usize,
}

impl PatchSpec {
    pub const SLICES: usize = 3;

    pub fn new(side: usize) -> Result<Self> {
        ensure(side >= 16 && side.is_multiple_of(2), || format!("patch side {side} must be even and >= 16"))?;
        Ok(PatchSpec { side })
    }
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec { side: 64 }
    }
}

/// Boundary voxels of a binary slice: set voxels with an unset 8-neighbour,
/// where off-grid neighbours count as unset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeSet {
    pub dims: [usize; 2],
    /// `(row, col)` in row-major order.
    pub voxels: Vec<[usize; 2]>,
}

pub fn extract_edge_set(mask: &[u8], dims: [usize; 2]) -> Result<EdgeSet> {
    let [h, w] = dims;
    ensure(mask.len() == h * w, || format!("mask of {} voxels for a {h}x{w} slice", mask.len()))?;
    let on = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize] != 0
    };
    let mut voxels = Vec::new();
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] == 0 {
                continue;
            }
            any = true;
            let (yi, xi) = (y as isize, x as isize);
            let boundary = (-1..=1).any(|dy| (-1..=1).any(|dx| (dy != 0 || dx != 0) && !on(yi + dy, xi + dx)));
            if boundary {
                voxels.push([y, x]);
            }
        }
    }
    ensure(any, || "empty mask slice has no edge".into())?;
    Ok(EdgeSet { dims, voxels })
}

/// Exact Euclidean distance from every voxel of the slice to the nearest
/// edge voxel, by two passes of the 1D lower-envelope transform.
pub fn edge_distance_field(edge: &EdgeSet) -> Vec<f64> {
    let [h, w] = edge.dims;
    const FAR: f64 = 1e20;
    let mut f = vec![FAR; h * w];
    for &[y, x] in &edge.voxels {
        f[y * w + x] = 0.0;
    }
    let mut buf = Vec::new();
    for y in 0..h {
        dt_1d(&mut f[y * w..(y + 1) * w], &mut buf);
    }
    let mut col = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = f[y * w + x];
        }
        dt_1d(&mut col, &mut buf);
        for y in 0..h {
            f[y * w + x] = col[y];
        }
    }
    f.into_iter().map(f64::sqrt).collect()
}

/// Squared distance transform of a sampled function, in place.
fn dt_1d(f: &mut [f64], out: &mut Vec<f64>) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let meet = |q: usize, p: usize| ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
    for q in 1..n {
        let mut s = meet(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = meet(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    out.clear();
    out.resize(n, 0.0);
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
    f.copy_from_slice(out);
}

/// Region label of every voxel of one slice for one nodule.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplingRegions {
    pub dims: [usize; 2],
    pub labels: Vec<SampleClass>,
    /// Nodule center `(row, col)` on this slice.
    pub center: [usize; 2],
    /// Inclusive `(row, col)` bounds of the high-background box.
    pub hb_box: ([usize; 2], [usize; 2]),
}

impl SamplingRegions {
    pub fn voxels(&self, class: SampleClass) -> Vec<[usize; 2]> {
        let w = self.dims[1];
        self.labels.iter().enumerate().filter(|(_, &l)| l == class).map(|(i, _)| [i / w, i % w]).collect()
    }
}

/// `P` = mask, `HB` = mask bounding box dilated by `ceil(L/2)` per side and
/// clipped, minus `P`; `LB` = the rest. `center` is the projected 3D centroid.
pub fn partition_regions(mask: &[u8], dims: [usize; 2], patch: PatchSpec, center: [usize; 2]) -> Result<SamplingRegions> {
    let [h, w] = dims;
    ensure(mask.len() == h * w, || "mask/slice size mismatch".into())?;
    let mut lo = [usize::MAX; 2];
    let mut hi = [0usize; 2];
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m != 0) {
        let p = [i / w, i % w];
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    ensure(lo[0] != usize::MAX, || "empty mask slice".into())?;
    let grow = patch.side.div_ceil(2);
    let blo = [lo[0].saturating_sub(grow), lo[1].saturating_sub(grow)];
    let bhi = [(hi[0] + grow).min(h - 1), (hi[1] + grow).min(w - 1)];
    let labels = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            if mask[i] != 0 {
                SampleClass::Nodule
            } else if (blo[0]..=bhi[0]).contains(&y) && (blo[1]..=bhi[1]).contains(&x) {
                SampleClass::HighBg
            } else {
                SampleClass::LowBg
            }
        })
        .collect();
    Ok(SamplingRegions { dims, labels, center, hb_box: (blo, bhi) })
}

/// Normalized sampling distribution over one class region.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    pub class: SampleClass,
    pub voxels: Vec<[usize; 2]>,
    pub weights: Vec<f64>,
}

impl ClassWeights {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }
}

/// Sampling rule for the three class fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    /// Edge- and intensity-aware fields.
    Proposed,
    /// Same regions and budget, uniform weights inside each region.
    Uniform,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Proposed => "proposed",
            Strategy::Uniform => "uniform",
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proposed" => Ok(Strategy::Proposed),
            "uniform" | "uniform-weighted-baseline" => Ok(Strategy::Uniform),
            _ => Err(Error::Invalid(format!("unknown sampling strategy `{s}`"))),
        }
    }
}

/// Weights for `class` restricted to `pool` (a subset of the class region).
pub fn weights_for_pool<T: Scalar>(
    class: SampleClass,
    pool: Vec<[usize; 2]>,
    edge_distance: &[f64],
    center: [usize; 2],
    r: f64,
    intensities: &[T],
    dims: [usize; 2],
) -> Result<ClassWeights> {
    ensure(!pool.is_empty(), || format!("empty {class} region"))?;
    ensure(r > 0.0, || format!("radius {r} must be positive"))?;
    let w = dims[1];
    let d_edge = |p: &[usize; 2]| edge_distance[p[0] * w + p[1]];
    let raw: Vec<f64> = match class {
        SampleClass::Nodule | SampleClass::HighBg => {
            // shift by the region minimum so far-away rings do not underflow
            let dmin = pool.iter().map(d_edge).fold(f64::INFINITY, f64::min);
            pool.iter()
                .map(|p| {
                    let e = (-(d_edge(p) - dmin) / r).exp();
                    match class {
                        SampleClass::Nodule => e,
                        _ => (intensities[p[0] * w + p[1]].as_f64() + INTENSITY_EPS) * e,
                    }
                })
                .collect()
        }
        SampleClass::LowBg => pool
            .iter()
            .map(|p| {
                let dy = p[0] as f64 - center[0] as f64;
                let dx = p[1] as f64 - center[1] as f64;
                (intensities[p[0] * w + p[1]].as_f64() + INTENSITY_EPS) * (dy * dy + dx * dx).sqrt()
            })
            .collect(),
    };
    let total: f64 = raw.iter().sum();
    ensure(total > 0.0 && total.is_finite(), || format!("{class} weights have no mass"))?;
    Ok(ClassWeights { class, voxels: pool, weights: raw.into_iter().map(|v| v / total).collect() })
}

/// Class field over the whole region of `class`.
pub fn class_weights<T: Scalar>(
    regions: &SamplingRegions,
    class: SampleClass,
    edge: &EdgeSet,
    r: f64,
    intensities: &[T],
) -> Result<ClassWeights> {
    ensure(intensities.len() == regions.labels.len(), || "intensity/slice size mismatch".into())?;
    let field = edge_distance_field(edge);
    weights_for_pool(class, regions.voxels(class), &field, regions.center, r, intensities, regions.dims)
}

pub fn uniform_weights(class: SampleClass, pool: Vec<[usize; 2]>) -> Result<ClassWeights> {
    ensure(!pool.is_empty(), || format!("empty {class} region"))?;
    let n = pool.len() as f64;
    let weights = vec![1.0 / n; pool.len()];
    Ok(ClassWeights { class, voxels: pool, weights })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleBudget {
    pub n_nodule: usize,
    pub n_high_bg: usize,
    pub n_low_bg: usize,
}

impl SampleBudget {
    pub fn total(&self) -> usize {
        self.n_nodule + self.n_high_bg + self.n_low_bg
    }

    pub fn count(&self, class: SampleClass) -> usize {
        match class {
            SampleClass::Nodule => self.n_nodule,
            SampleClass::HighBg => self.n_high_bg,
            SampleClass::LowBg => self.n_low_bg,
        }
    }
}

/// `(N, N, ceil(N/2))` for `N` edge voxels.
pub fn sample_budget(n_edge: usize) -> Result<SampleBudget> {
    ensure(n_edge >= 1, || "sample budget needs at least one edge voxel".into())?;
    Ok(SampleBudget { n_nodule: n_edge, n_high_bg: n_edge, n_low_bg: n_edge.div_ceil(2) })
}

/// Weighted draw: without replacement while the pool allows, otherwise with.
pub fn draw_centers(weights: &ClassWeights, count: usize, seed: u64) -> Result<Vec<[usize; 2]>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw_with(weights, count, &mut rng)
}

pub fn draw_with(weights: &ClassWeights, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<[usize; 2]>> {
    ensure(!weights.is_empty(), || "cannot draw from an empty pool".into())?;
    ensure(count >= 1, || "draw count must be >= 1".into())?;
    let idx: Vec<usize> = (0..weights.len()).collect();
    if count <= weights.len() {
        let chosen = idx
            .choose_multiple_weighted(rng, count, |&i| weights.weights[i])
            .map_err(|e| Error::Invalid(format!("weighted draw: {e}")))?;
        Ok(chosen.map(|&i| weights.voxels[i]).collect())
    } else {
        let dist = WeightedIndex::new(&weights.weights).map_err(|e| Error::Invalid(format!("weighted draw: {e}")))?;
        Ok((0..count).map(|_| weights.voxels[dist.sample(rng)]).collect())
    }
}

/// One patch center chosen for segmentation training.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SampledCenter {
    pub scan_id: String,
    pub z: usize,
    pub y: usize,
    pub x: usize,
    pub class: SampleClass,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub patch: PatchSpec,
    pub strategy: Strategy,
    /// Multiplies the edge count `N` before the budget is formed (1.0 keeps
    /// the full `2.5 N`; smaller values subsample for short runs).
    pub budget_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { patch: PatchSpec::default(), strategy: Strategy::Proposed, budget_scale: 1.0 }
    }
}

/// Rounded voxel centroid of a 3D mask.
pub fn mask_centroid(mask: &[u8], dims: [usize; 3]) -> Option<[f64; 3]> {
    let (mut s, mut n) = ([0.0f64; 3], 0usize);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m != 0) {
        let p = [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]];
        for a in 0..3 {
            s[a] += p[a] as f64;
        }
        n += 1;
    }
    (n > 0).then(|| s.map(|v| v / n as f64))
}

/// Draw the full sample set of one scan: every slice of every nodule.
///
/// Voxels of other nodules are removed from background pools.
pub fn sample_scan<T: Scalar>(
    volume: &NormalizedVolume<T>,
    annotations: &[NoduleAnnotation],
    config: &SamplerConfig,
    seed: u64,
) -> Result<Vec<SampledCenter>> {
    let g = volume.geometry;
    let [dz, h, w] = g.dims;
    let masks: Vec<_> = annotations.iter().map(|a| rasterize_nodule(&g, a)).collect::<Result<_>>()?;
    let mut any_nodule = vec![0u8; g.len()];
    for m in &masks {
        for (a, &b) in any_nodule.iter_mut().zip(&m.data) {
            *a |= b;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let in_plane = (g.spacing[1] + g.spacing[2]) / 2.0;
    for (ann, mask) in annotations.iter().zip(&masks) {
        let c3 = mask_centroid(&mask.data, g.dims).expect("rasterized masks are non-empty");
        let center = [c3[1].round() as usize, c3[2].round() as usize];
        let r = ann.radius_mm() / in_plane;
        for z in 0..dz {
            let slice = mask.slice(z);
            if !slice.iter().any(|&v| v != 0) {
                continue;
            }
            let others = &any_nodule[z * h * w..(z + 1) * h * w];
            let edge = extract_edge_set(slice, [h, w])?;
            let n = ((edge.voxels.len() as f64 * config.budget_scale).round() as usize).max(1);
            let budget = sample_budget(n)?;
            let regions = partition_regions(slice, [h, w], config.patch, center)?;
            let field = edge_distance_field(&edge);
            let intensities = volume.slice(z);
            for class in SampleClass::ALL {
                let pool: Vec<[usize; 2]> = regions
                    .voxels(class)
                    .into_iter()
                    .filter(|p| class == SampleClass::Nodule || others[p[0] * w + p[1]] == 0)
                    .collect();
                if pool.is_empty() {
                    continue;
                }
                let weights = match config.strategy {
                    Strategy::Proposed => weights_for_pool(class, pool, &field, center, r.max(0.5), intensities, [h, w])?,
                    Strategy::Uniform => uniform_weights(class, pool)?,
                };
                for [y, x] in draw_with(&weights, budget.count(class), &mut rng)? {
                    out.push(SampledCenter { scan_id: volume.scan_id.clone(), z, y, x, class });
                }
            }
        }
    }
    Ok(out)
}

pub const CENTERS_HEADER: [&str; 5] = ["scan_id", "z", "y", "x", "class"];

pub fn write_centers<W: Write>(writer: W, centers: &[SampledCenter]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CENTERS_HEADER)?;
    for c in centers {
        w.write_record([c.scan_id.clone(), c.z.to_string(), c.y.to_string(), c.x.to_string(), c.class.to_string()])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn save_centers(path: &Path, centers: &[SampledCenter]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_centers(f, centers)
}

pub fn load_centers(path: &Path) -> Result<Vec<SampledCenter>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |m: String| Error::Parse { line, msg: m };
        if rec.len() != 5 {
            return Err(bad(format!("expected 5 columns, found {}", rec.len())));
        }
        let num = |i: usize| rec[i].parse::<usize>().map_err(|e| bad(format!("{}: {e}", CENTERS_HEADER[i])));
        out.push(SampledCenter {
            scan_id: rec[0].to_string(),
            z: num(1)?,
            y: num(2)?,
            x: num(3)?,
            class: rec[4].parse().map_err(|e: Error| bad(e.to_string()))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_voxel_edge() {
        let mut m = vec![0u8; 25];
        m[12] = 1;
        let e = extract_edge_set(&m, [5, 5]).unwrap();
        assert_eq!(e.voxels, vec![[2, 2]]);
        assert!(extract_edge_set(&[0u8; 4], [2, 2]).is_err());
    }

    #[test]
    fn budget_examples() {
        assert_eq!(sample_budget(100).unwrap(), SampleBudget { n_nodule: 100, n_high_bg: 100, n_low_bg: 50 });
        assert_eq!(sample_budget(1).unwrap(), SampleBudget { n_nodule: 1, n_high_bg: 1, n_low_bg: 1 });
        assert!(sample_budget(0).is_err());
    }

    #[test]
    fn distance_transform_on_line() {
        let e = EdgeSet { dims: [1, 6], voxels: vec![[0, 1], [0, 5]] };
        assert_eq!(edge_distance_field(&e), vec![1.0, 0.0, 1.0, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn strategy_parse() {
        assert_eq!("uniform".parse::<Strategy>().unwrap(), Strategy::Uniform);
        assert!("bogus".parse::<Strategy>().is_err());
    }
}
