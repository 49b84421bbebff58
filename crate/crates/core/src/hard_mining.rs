//! Offline hard mining: false-positive components become negative centers,
//! poorly segmented nodules get `T = round(C (1 - O))` extra positives.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cascade::{centroid, first_pass, label_components_2d, WindowSpec};
use crate::ct_data::{rasterize_nodule, NoduleAnnotation, NormalizedVolume, VoxelMask};
use crate::error::{ensure, Error, Result};
use crate::sampler::{draw_with, edge_distance_field, extract_edge_set, weights_for_pool, PatchSpec, SampleClass};
use crate::segnet::{train_segmentation, History, SegModel, SegTrainSpec, SliceSegmenter, TrainingPatch};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OverlapMetric {
    Iou,
    Dice,
}

impl FromStr for OverlapMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iou" => Ok(OverlapMetric::Iou),
            "dice" => Ok(OverlapMetric::Dice),
            _ => Err(Error::Invalid(format!("unknown overlap metric `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HardMiningPolicy {
    pub threshold: f64,
    pub overlap: OverlapMetric,
    pub rounds: usize,
    /// Multiplies each nodule's `T` (rounded up) for reduced-scale runs.
    pub resample_scale: f64,
}

impl Default for HardMiningPolicy {
    fn default() -> Self {
        HardMiningPolicy { threshold: 0.5, overlap: OverlapMetric::Iou, rounds: 1, resample_scale: 1.0 }
    }
}

impl HardMiningPolicy {
    pub fn validate(&self) -> Result<()> {
        ensure(self.threshold > 0.0 && self.threshold < 1.0, || format!("threshold {} must be in (0,1)", self.threshold))?;
        ensure(self.resample_scale > 0.0 && self.resample_scale <= 1.0, || format!("resample scale {} must be in (0,1]", self.resample_scale))
    }
}

fn counts(pred: &[u8], gt: &[u8]) -> Result<(usize, usize, usize)> {
    ensure(pred.len() == gt.len(), || format!("overlap of {} and {} voxels", pred.len(), gt.len()))?;
    let (mut inter, mut p, mut g) = (0, 0, 0);
    for (&a, &b) in pred.iter().zip(gt) {
        let (a, b) = (a != 0, b != 0);
        inter += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    Ok((inter, p, g))
}

/// Intersection over union; 1 when both are empty.
pub fn overlap_rate(pred: &[u8], gt: &[u8]) -> Result<f64> {
    overlap_with(OverlapMetric::Iou, pred, gt)
}

pub fn overlap_with(metric: OverlapMetric, pred: &[u8], gt: &[u8]) -> Result<f64> {
    let (inter, p, g) = counts(pred, gt)?;
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(match metric {
        OverlapMetric::Iou => inter as f64 / (p + g - inter) as f64,
        OverlapMetric::Dice => 2.0 * inter as f64 / (p + g) as f64,
    })
}

/// `round(C (1 - O))`, halves rounded up.
pub fn positive_resample_count(c: usize, o: f64) -> Result<usize> {
    ensure((0.0..=1.0).contains(&o), || format!("overlap {o} outside [0,1]"))?;
    let t = (c as f64 * (1.0 - o) + 0.5).floor() as usize;
    Ok(t.min(c))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MinedSource {
    FalsePositive,
    Resample,
    Original,
}

impl MinedSource {
    pub fn name(self) -> &'static str {
        match self {
            MinedSource::FalsePositive => "false_positive",
            MinedSource::Resample => "resample",
            MinedSource::Original => "original",
        }
    }
}

impl fmt::Display for MinedSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MinedSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "false_positive" => Ok(MinedSource::FalsePositive),
            "resample" => Ok(MinedSource::Resample),
            "original" => Ok(MinedSource::Original),
            _ => Err(Error::Invalid(format!("unknown sample source `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MinedCenter {
    pub scan_id: String,
    pub z: usize,
    pub y: usize,
    pub x: usize,
    pub positive: bool,
    pub source: MinedSource,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MinedSampleSet {
    pub negatives: Vec<MinedCenter>,
    pub positives: Vec<MinedCenter>,
}

impl MinedSampleSet {
    pub fn len(&self) -> usize {
        self.negatives.len() + self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn extend(&mut self, other: MinedSampleSet) {
        self.negatives.extend(other.negatives);
        self.positives.extend(other.positives);
    }

    pub fn all(&self) -> impl Iterator<Item = &MinedCenter> {
        self.negatives.iter().chain(&self.positives)
    }
}

/// Does the `side x side` window centered at `(y, x)` on slice `z` touch gold?
fn window_hits(gold: &VoxelMask, z: usize, y: usize, x: usize, side: usize) -> bool {
    let [_, h, w] = gold.dims;
    let half = side / 2;
    let (y0, x0) = (y.saturating_sub(half), x.saturating_sub(half));
    let (y1, x1) = ((y + side - half).min(h), (x + side - half).min(w));
    let s = gold.slice(z);
    (y0..y1).any(|r| s[r * w + x0..r * w + x1].iter().any(|&v| v != 0))
}

/// Split `total` across `parts` in proportion to `sizes` (largest remainder,
/// ties to the earlier part).
fn apportion(total: usize, sizes: &[usize]) -> Vec<usize> {
    let sum: usize = sizes.iter().sum();
    if sum == 0 {
        return vec![0; sizes.len()];
    }
    let exact: Vec<f64> = sizes.iter().map(|&s| total as f64 * s as f64 / sum as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest: Vec<usize> = (0..sizes.len()).collect();
    rest.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = total - out.iter().sum::<usize>();
    for &i in rest.iter().take(short) {
        out[i] += 1;
    }
    out
}

/// Mine one scan given its binarized first-pass prediction.
pub fn mine_scan<T: Scalar>(
    pred: &VoxelMask,
    volume: &NormalizedVolume<T>,
    annotations: &[NoduleAnnotation],
    policy: &HardMiningPolicy,
    patch: PatchSpec,
    rng: &mut ChaCha8Rng,
) -> Result<MinedSampleSet> {
    let g = volume.geometry;
    let [dz, h, w] = g.dims;
    ensure(pred.dims == g.dims, || format!("prediction dims {:?} vs volume {:?}", pred.dims, g.dims))?;
    let nodules: Vec<VoxelMask> = annotations.iter().map(|a| rasterize_nodule(&g, a)).collect::<Result<_>>()?;
    let mut gold = VoxelMask::empty(&volume.scan_id, g.dims);
    for m in &nodules {
        gold.union_with(m)?;
    }
    let mut out = MinedSampleSet::default();
    // Predicted voxels that belong to components touching each nodule.
    let mut touching: Vec<Vec<u8>> = vec![vec![0u8; g.len()]; nodules.len()];
    for z in 0..dz {
        let gs = gold.slice(z);
        for comp in label_components_2d(pred.slice(z), [h, w]) {
            let hit_any = comp.iter().any(|&i| gs[i] != 0);
            if !hit_any {
                let c = centroid(&comp, [1, h, w]);
                let (y, x) = (c[1].round() as usize, c[2].round() as usize);
                if !window_hits(&gold, z, y, x, patch.side) {
                    out.negatives.push(MinedCenter {
                        scan_id: volume.scan_id.clone(),
                        z,
                        y,
                        x,
                        positive: false,
                        source: MinedSource::FalsePositive,
                    });
                }
                continue;
            }
            for (k, m) in nodules.iter().enumerate() {
                let ms = m.slice(z);
                if comp.iter().any(|&i| ms[i] != 0) {
                    for &i in &comp {
                        touching[k][z * h * w + i] = 1;
                    }
                }
            }
        }
    }
    let in_plane = (g.spacing[1] + g.spacing[2]) / 2.0;
    for ((ann, m), pred_k) in annotations.iter().zip(&nodules).zip(&touching) {
        let o = overlap_with(policy.overlap, pred_k, &m.data)?;
        let mut slices = Vec::new();
        for z in 0..dz {
            if m.slice_has_any(z) {
                slices.push((z, extract_edge_set(m.slice(z), [h, w])?));
            }
        }
        let c: usize = slices.iter().map(|(_, e)| e.voxels.len()).sum();
        let t = positive_resample_count(c, o)?;
        let t = if policy.resample_scale < 1.0 { (t as f64 * policy.resample_scale).ceil() as usize } else { t };
        if t == 0 {
            continue;
        }
        let sizes: Vec<usize> = slices.iter().map(|(_, e)| e.voxels.len()).collect();
        let r = (ann.radius_mm() / in_plane).max(0.5);
        for ((z, edge), n) in slices.iter().zip(apportion(t, &sizes)) {
            if n == 0 {
                continue;
            }
            let s = m.slice(*z);
            let pool: Vec<[usize; 2]> = (0..h * w).filter(|&i| s[i] != 0).map(|i| [i / w, i % w]).collect();
            let field = edge_distance_field(edge);
            let weights = weights_for_pool(SampleClass::Nodule, pool, &field, [0, 0], r, volume.slice(*z), [h, w])?;
            for [y, x] in draw_with(&weights, n, rng)? {
                out.positives.push(MinedCenter {
                    scan_id: volume.scan_id.clone(),
                    z: *z,
                    y,
                    x,
                    positive: true,
                    source: MinedSource::Resample,
                });
            }
        }
    }
    Ok(out)
}

/// One scan with its gold annotations.
#[derive(Clone, Debug)]
pub struct LabeledScan<T> {
    pub volume: NormalizedVolume<T>,
    pub annotations: Vec<NoduleAnnotation>,
}

/// First-pass prediction over each training scan, then [`mine_scan`].
pub fn mine_hard_samples<T: Scalar, M: SliceSegmenter<T> + ?Sized>(
    model: &M,
    scans: &[LabeledScan<T>],
    policy: &HardMiningPolicy,
    windows: WindowSpec,
    patch: PatchSpec,
    batch: usize,
    seed: u64,
) -> Result<MinedSampleSet> {
    policy.validate()?;
    let mut out = MinedSampleSet::default();
    for (k, scan) in scans.iter().enumerate() {
        let map = first_pass(model, &scan.volume, windows, batch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let mined = mine_scan(&map.mask, &scan.volume, &scan.annotations, policy, patch, &mut rng)?;
        log::info!("mined {}: {} negatives, {} positives", scan.volume.scan_id, mined.negatives.len(), mined.positives.len());
        out.extend(mined);
    }
    Ok(out)
}

/// Continue training an already trained model at the fine-tune rate.
pub fn finetune_segmentation<T: Scalar>(model: &mut SegModel<T>, patches: &[TrainingPatch<T>], spec: &SegTrainSpec) -> Result<History> {
    ensure(!patches.is_empty(), || "fine-tuning needs a non-empty mined set".into())?;
    train_segmentation(model, patches, &spec.finetune())
}

pub const MINED_HEADER: [&str; 6] = ["scan_id", "z", "y", "x", "label", "source"];

pub fn write_mined<W: Write>(writer: W, centers: &[MinedCenter]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(MINED_HEADER)?;
    for c in centers {
        let label = if c.positive { "1" } else { "0" };
        w.write_record([c.scan_id.as_str(), &c.z.to_string(), &c.y.to_string(), &c.x.to_string(), label, c.source.name()])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn save_mined(path: &Path, centers: &[MinedCenter]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_mined(std::io::BufWriter::new(f), centers)
}

pub fn read_mined<R: std::io::Read>(reader: R) -> Result<Vec<MinedCenter>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().ne(MINED_HEADER) {
        return Err(Error::Parse { line: 1, msg: format!("mined header {:?}", header.iter().collect::<Vec<_>>()) });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |m: String| Error::Parse { line, msg: m };
        let int = |i: usize| rec[i].parse::<usize>().map_err(|_| bad(format!("`{}` is not an index", &rec[i])));
        let positive = match &rec[4] {
            "1" => true,
            "0" => false,
            other => return Err(bad(format!("label `{other}` must be 0 or 1"))),
        };
        out.push(MinedCenter {
            scan_id: rec[0].to_string(),
            z: int(1)?,
            y: int(2)?,
            x: int(3)?,
            positive,
            source: rec[5].parse().map_err(|e: Error| bad(e.to_string()))?,
        });
    }
    Ok(out)
}

pub fn load_mined(path: &Path) -> Result<Vec<MinedCenter>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_mined(f)
}
