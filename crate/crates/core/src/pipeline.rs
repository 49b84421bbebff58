//! Stage orchestration over a work directory. Every stage reads the previous
//! stages' artifacts from disk, writes its own and a manifest holding the
//! resolved config, its seed and the scans it touched.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nodet_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cascade::{extract_candidates, first_pass, load_candidates, save_candidates, second_pass, Candidate};
use crate::config::{ConfigDoc, PipelineConfig};
use crate::ct_data::{
    generate_phantom, load_annotations, load_volume, normalize_hu, rasterize_into, save_annotations, save_volume, ElementType,
    NoduleAnnotation, PhantomSpec, VoxelMask, HU_HI, HU_LO,
};
use crate::error::{ensure, Error, Result};
use crate::eval::{compute_cpm, compute_froc, match_candidates, save_ablation, save_froc, CpmReport, FrocCurve, ScoredScan};
use crate::fprnet::{
    extract_clf_patch, geometric_augment, random_mask_swap, save_swap_manifest, train_classifier, ClfHistory, ClfModel, ClfPatch,
    ClfTrainSpec, EnsembleWeights, MaskSwapSpec, Pooling, Variant,
};
use crate::hard_mining::{finetune_segmentation, load_mined, mine_hard_samples, save_mined, LabeledScan, MinedCenter};
use crate::sampler::{load_centers, sample_scan, save_centers, PatchSpec, SampledCenter, Strategy};
use crate::segnet::{extract_training_patch, train_segmentation, History, SegModel, SegTrainSpec, TrainingPatch};
use crate::Scalar;

/// Where the dataset and the stage outputs live.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub data: PathBuf,
    pub work: PathBuf,
}

impl Layout {
    /// Dataset under `work/data`.
    pub fn new(work: impl Into<PathBuf>) -> Self {
        let work = work.into();
        Layout { data: work.join("data"), work }
    }

    pub fn with_data(data: impl Into<PathBuf>, work: impl Into<PathBuf>) -> Self {
        Layout { data: data.into(), work: work.into() }
    }

    pub fn stage(&self, name: &str) -> PathBuf {
        self.work.join(name)
    }

    /// Segmentation model used for detection: fine-tuned when mining ran.
    pub fn detector(&self, config: &PipelineConfig) -> PathBuf {
        if config.mining.enabled {
            self.stage("mine").join("model.ckpt")
        } else {
            self.stage("seg").join("model.ckpt")
        }
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed of a named stage, derived from the run seed.
pub fn stage_seed(base: u64, stage: &str) -> u64 {
    let tag = stage.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    splitmix(base ^ tag)
}

/// Seed of the `index`-th item inside a stage.
pub fn item_seed(stage: u64, index: usize) -> u64 {
    splitmix(stage.wrapping_add(index as u64))
}

pub fn scan_name(index: usize) -> String {
    format!("scan{index:03}")
}

/// What a stage recorded about itself.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub stage: String,
    pub stage_seed: u64,
    pub scans: Vec<String>,
    pub config: PipelineConfig,
}

const MANIFEST_SECTION: &str = "[manifest]";

impl Manifest {
    pub fn to_text(&self) -> String {
        format!(
            "{}\n{MANIFEST_SECTION}\nstage = {}\nstage_seed = {}\nscans = {}\n",
            self.config.to_text(),
            self.stage,
            self.stage_seed,
            self.scans.join(",")
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let at = text.find(MANIFEST_SECTION).ok_or_else(|| Error::Invalid("manifest section missing".into()))?;
        let config = PipelineConfig::from_text(&text[..at])?;
        let doc = ConfigDoc::parse(&text[at..])?;
        let field = |k: &str| doc.get(&format!("manifest.{k}")).ok_or_else(|| Error::Invalid(format!("manifest lacks `{k}`")));
        let stage_seed = field("stage_seed")?.parse().map_err(|_| Error::Invalid("bad stage seed".into()))?;
        let scans = field("scans")?;
        Ok(Manifest {
            stage: field("stage")?.to_string(),
            stage_seed,
            scans: scans.split(',').filter(|s| !s.is_empty()).map(str::to_string).collect(),
            config,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_text(&dir.join("manifest.txt"), &self.to_text())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.txt");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Manifest::from_text(&text).map_err(|e| Error::format(&path, e.to_string()))
    }
}

fn manifest(config: &PipelineConfig, stage: &str, seed: u64, scans: Vec<String>) -> Manifest {
    Manifest { stage: stage.into(), stage_seed: seed, scans, config: config.clone() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

pub const SPLIT_HEADER: &str = "scan_id,split";

/// Read `split.csv` as `(scan_id, split)` rows.
pub fn load_split(data: &Path) -> Result<Vec<(String, Split)>> {
    let path = data.join("split.csv");
    let mut rdr = csv::Reader::from_path(&path).map_err(|e| Error::format(&path, e.to_string()))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let split = match rec.get(1) {
            Some("train") => Split::Train,
            Some("test") => Split::Test,
            other => return Err(Error::format(&path, format!("line {line}: bad split {other:?}"))),
        };
        out.push((rec.get(0).unwrap_or_default().to_string(), split));
    }
    Ok(out)
}

/// Generate the phantom dataset: one MetaImage per scan, the annotation CSV
/// and the train/test split. The first `train` scans are the training split.
pub fn synth(config: &PipelineConfig, data: &Path) -> Result<()> {
    config.validate()?;
    create_dir(data)?;
    let seed = stage_seed(config.seed, "synth");
    let mut annotations = Vec::new();
    let mut split = format!("{SPLIT_HEADER}\n");
    let mut names = Vec::with_capacity(config.data.scans);
    for i in 0..config.data.scans {
        let id = scan_name(i);
        let spec = PhantomSpec { seed: item_seed(seed, i), ..config.data.phantom.clone() };
        let phantom = generate_phantom::<f64>(&spec, &id)?;
        save_volume(&data.join(format!("{id}.mhd")), &phantom.volume, ElementType::Short)?;
        annotations.extend(phantom.annotations);
        let s = if i < config.data.train { Split::Train } else { Split::Test };
        split.push_str(&format!("{id},{}\n", s.name()));
        names.push(id);
    }
    save_annotations(&data.join("annotations.csv"), &annotations)?;
    write_text(&data.join("split.csv"), &split)?;
    log::info!("synthesized {} scans with {} nodules", names.len(), annotations.len());
    manifest(config, "synth", seed, names).save(data)
}

/// Normalized scans with their annotations and the split.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub scans: Vec<LabeledScan<T>>,
    pub split: Vec<Split>,
}

impl<T: Scalar> Dataset<T> {
    pub fn load(data: &Path) -> Result<Self> {
        let rows = load_split(data)?;
        let annotations = load_annotations(&data.join("annotations.csv"))?;
        let mut scans = Vec::with_capacity(rows.len());
        for (id, _) in &rows {
            let volume = load_volume::<T>(&data.join(format!("{id}.mhd")))?;
            let anns: Vec<NoduleAnnotation> = annotations.iter().filter(|a| a.scan_id == *id).cloned().collect();
            scans.push(LabeledScan { volume: normalize_hu(&volume, HU_LO, HU_HI)?, annotations: anns });
        }
        let known: BTreeSet<&str> = rows.iter().map(|(id, _)| id.as_str()).collect();
        if let Some(a) = annotations.iter().find(|a| !known.contains(a.scan_id.as_str())) {
            return Err(Error::Invalid(format!("annotation for unknown scan `{}`", a.scan_id)));
        }
        Ok(Dataset { scans, split: rows.into_iter().map(|(_, s)| s).collect() })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.scans.len()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn ids(&self, split: Split) -> Vec<String> {
        self.indices(split).into_iter().map(|i| self.scans[i].volume.scan_id.clone()).collect()
    }

    pub fn subset(&self, split: Split) -> Vec<LabeledScan<T>> {
        self.indices(split).into_iter().map(|i| self.scans[i].clone()).collect()
    }

    /// Index of a training scan; test scans are refused.
    fn train_index(&self, id: &str) -> Result<usize> {
        let i = self
            .scans
            .iter()
            .position(|s| s.volume.scan_id == id)
            .ok_or_else(|| Error::Invalid(format!("unknown scan `{id}`")))?;
        ensure(self.split[i] == Split::Train, || format!("scan `{id}` belongs to the test split"))?;
        Ok(i)
    }
}

/// Union of the rasterized annotations of a scan.
pub fn gold_mask<T: Scalar>(scan: &LabeledScan<T>) -> Result<VoxelMask> {
    let g = scan.volume.geometry;
    let mut mask = VoxelMask::empty(&scan.volume.scan_id, g.dims);
    for a in &scan.annotations {
        rasterize_into(&mut mask, &g, a)?;
    }
    Ok(mask)
}

/// Segmentation patches for `(scan_id, [z, y, x])` centers of training scans.
pub fn seg_patches<'a, T: Scalar>(
    data: &Dataset<T>,
    centers: impl IntoIterator<Item = (&'a str, [usize; 3])>,
    patch: PatchSpec,
) -> Result<Vec<TrainingPatch<T>>> {
    let mut masks: HashMap<usize, VoxelMask> = HashMap::new();
    let mut out = Vec::new();
    for (id, c) in centers {
        let i = data.train_index(id)?;
        if let std::collections::hash_map::Entry::Vacant(e) = masks.entry(i) {
            e.insert(gold_mask(&data.scans[i])?);
        }
        out.push(extract_training_patch(&data.scans[i].volume, &masks[&i], c, patch)?);
    }
    Ok(out)
}

fn distinct<'a>(ids: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    ids.into_iter().collect::<BTreeSet<_>>().into_iter().map(str::to_string).collect()
}

/// Stage-1 patch centers over the training scans.
pub fn sample<T: Scalar>(config: &PipelineConfig, layout: &Layout) -> Result<Vec<SampledCenter>> {
    let data = Dataset::<T>::load(&layout.data)?;
    let dir = layout.stage("sample");
    create_dir(&dir)?;
    let seed = stage_seed(config.seed, "sample");
    let mut centers = Vec::new();
    for (k, i) in data.indices(Split::Train).into_iter().enumerate() {
        let scan = &data.scans[i];
        centers.extend(sample_scan(&scan.volume, &scan.annotations, &config.sampling, item_seed(seed, k))?);
    }
    log::info!("sampled {} patch centers", centers.len());
    save_centers(&dir.join("centers.csv"), &centers)?;
    manifest(config, "sample", seed, data.ids(Split::Train)).save(&dir)?;
    Ok(centers)
}

/// Train the segmentation model on the sampled centers.
pub fn train_seg<T: Scalar>(config: &PipelineConfig, layout: &Layout) -> Result<History> {
    let data = Dataset::<T>::load(&layout.data)?;
    let dir = layout.stage("seg");
    create_dir(&dir)?;
    let centers = load_centers(&layout.stage("sample").join("centers.csv"))?;
    let patches = seg_patches(&data, centers.iter().map(|c| (c.scan_id.as_str(), [c.z, c.y, c.x])), config.sampling.patch)?;
    let seed = stage_seed(config.seed, "seg");
    let mut model = SegModel::<T>::new(config.seg_model.clone(), seed)?;
    let spec = SegTrainSpec { seed: item_seed(seed, 1), ..config.seg_train.clone() };
    let history = train_segmentation(&mut model, &patches, &spec)?;
    model.save(&dir.join("model.ckpt"))?;
    history.save(&dir.join("history.csv"))?;
    let scans = distinct(centers.iter().map(|c| c.scan_id.as_str()));
    manifest(config, "seg", seed, scans).save(&dir)?;
    Ok(history)
}

/// Hard mining rounds, each followed by fine-tuning on the mined samples.
/// Does nothing when mining is disabled.
pub fn mine<T: Scalar>(config: &PipelineConfig, layout: &Layout) -> Result<Vec<MinedCenter>> {
    if !config.mining.enabled {
        return Ok(Vec::new());
    }
    let data = Dataset::<T>::load(&layout.data)?;
    let dir = layout.stage("mine");
    create_dir(&dir)?;
    let mut model = SegModel::<T>::load(&layout.stage("seg").join("model.ckpt"))?;
    let train = data.subset(Split::Train);
    let seed = stage_seed(config.seed, "mine");
    let mut all = Vec::new();
    let mut log_text = String::new();
    for round in 0..config.mining.policy.rounds {
        let round_seed = item_seed(seed, round);
        let mined = mine_hard_samples(
            &model,
            &train,
            &config.mining.policy,
            config.cascade.windows,
            config.sampling.patch,
            config.cascade.batch,
            round_seed,
        )?;
        log::info!("mining round {round}: {} negatives, {} positives", mined.negatives.len(), mined.positives.len());
        let centers: Vec<MinedCenter> = mined.all().cloned().collect();
        if centers.is_empty() {
            break;
        }
        let patches = seg_patches(&data, centers.iter().map(|c| (c.scan_id.as_str(), [c.z, c.y, c.x])), config.sampling.patch)?;
        let spec = SegTrainSpec { seed: item_seed(round_seed, 1), ..config.seg_train.clone() };
        let history = finetune_segmentation(&mut model, &patches, &spec)?;
        let mut buf = Vec::new();
        history.write(&mut buf)?;
        log_text.push_str(&format!("# round = {round}\n{}", String::from_utf8_lossy(&buf)));
        all.extend(centers);
    }
    save_mined(&dir.join("mined.csv"), &all)?;
    write_text(&dir.join("history.csv"), &log_text)?;
    model.save(&dir.join("model.ckpt"))?;
    manifest(config, "mine", seed, data.ids(Split::Train)).save(&dir)?;
    Ok(all)
}

/// Candidate counts of one cascade pass over one split.
#[derive(Clone, Debug, PartialEq)]
pub struct PassStats {
    pub split: Split,
    pub pass: &'static str,
    pub scans: usize,
    pub candidates: usize,
    pub false_positives: usize,
    pub hits: usize,
    pub ground_truths: usize,
}

impl PassStats {
    pub fn fp_per_scan(&self) -> f64 {
        self.false_positives as f64 / self.scans.max(1) as f64
    }

    pub fn sensitivity(&self) -> f64 {
        self.hits as f64 / self.ground_truths.max(1) as f64
    }
}

pub const PASS_HEADER: &str = "split,pass,scans,candidates,false_positives,fp_per_scan,hits,ground_truths,sensitivity";

fn pass_stats<T: Scalar>(data: &Dataset<T>, split: Split, pass: &'static str, candidates: &[Vec<Candidate>]) -> PassStats {
    let mut s = PassStats { split, pass, scans: 0, candidates: 0, false_positives: 0, hits: 0, ground_truths: 0 };
    for i in data.indices(split) {
        let m = match_candidates(&candidates[i], &data.scans[i].annotations, 0.0);
        s.scans += 1;
        s.candidates += candidates[i].len();
        s.false_positives += m.false_positives;
        s.hits += m.hit_count();
        s.ground_truths += m.hits.len();
    }
    s
}

pub fn load_pass_stats(path: &Path) -> Result<Vec<PassStats>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let bad = || Error::format(path, format!("bad row {:?}", rec.iter().collect::<Vec<_>>()));
        let num = |i: usize| rec.get(i).and_then(|v| v.parse::<usize>().ok()).ok_or_else(bad);
        let split = match rec.get(0) {
            Some("train") => Split::Train,
            Some("test") => Split::Test,
            _ => return Err(bad()),
        };
        let pass = match rec.get(1) {
            Some("first") => "first",
            Some("second") => "second",
            _ => return Err(bad()),
        };
        out.push(PassStats {
            split,
            pass,
            scans: num(2)?,
            candidates: num(3)?,
            false_positives: num(4)?,
            hits: num(6)?,
            ground_truths: num(7)?,
        });
    }
    Ok(out)
}

/// Two-pass cascade over every scan. Writes `first.csv`, `second.csv` and
/// per-split pass statistics.
pub fn detect<T: Scalar>(config: &PipelineConfig, layout: &Layout) -> Result<Vec<PassStats>> {
    let data = Dataset::<T>::load(&layout.data)?;
    let dir = layout.stage("detect");
    create_dir(&dir)?;
    let model = SegModel::<T>::load(&layout.detector(config))?;
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for scan in &data.scans {
        let v = &scan.volume;
        let map1 = first_pass(&model, v, config.cascade.windows, config.cascade.batch)?;
        let map2 = second_pass(&model, v, &map1.mask, config.sampling.patch.side, config.cascade.batch)?;
        first.push(extract_candidates(&map1, &v.geometry)?);
        second.push(extract_candidates(&map2, &v.geometry)?);
        log::debug!("{}: {} first-pass, {} second-pass candidates", v.scan_id, first.last().map_or(0, Vec::len), second.last().map_or(0, Vec::len));
    }
    save_candidates(&dir.join("first.csv"), &first.concat())?;
    save_candidates(&dir.join("second.csv"), &second.concat())?;
    let mut stats = Vec::new();
    for split in [Split::Train, Split::Test] {
        stats.push(pass_stats(&data, split, "first", &first));
        stats.push(pass_stats(&data, split, "second", &second));
    }
    let mut text = format!("{PASS_HEADER}\n");
    for s in &stats {
        log::info!("{} {} pass: {:.2} FP/scan, sensitivity {:.3}", s.split.name(), s.pass, s.fp_per_scan(), s.sensitivity());
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            s.split.name(),
            s.pass,
            s.scans,
            s.candidates,
            s.false_positives,
            s.fp_per_scan(),
            s.hits,
            s.ground_truths,
            s.sensitivity()
        ));
    }
    write_text(&dir.join("passes.csv"), &text)?;
    let all: Vec<String> = data.scans.iter().map(|s| s.volume.scan_id.clone()).collect();
    manifest(config, "detect", 0, all).save(&dir)?;
    Ok(stats)
}

/// Group candidates by scan, in dataset order.
fn by_scan<T: Scalar>(data: &Dataset<T>, candidates: Vec<Candidate>) -> Result<Vec<Vec<Candidate>>> {
    let index: HashMap<&str, usize> = data.scans.iter().enumerate().map(|(i, s)| (s.volume.scan_id.as_str(), i)).collect();
    let mut out = vec![Vec::new(); data.scans.len()];
    for c in candidates {
        let i = *index.get(c.scan_id.as_str()).ok_or_else(|| Error::Invalid(format!("candidate for unknown scan `{}`", c.scan_id)))?;
        out[i].push(c);
    }
    Ok(out)
}

fn candidate_voxel<T: Scalar>(scan: &LabeledScan<T>, c: &Candidate) -> Result<[usize; 3]> {
    let g = &scan.volume.geometry;
    g.nearest_voxel(g.world_to_voxel(c.center_world))
        .ok_or_else(|| Error::Invalid(format!("candidate {:?} lies outside scan `{}`", c.center_world, c.scan_id)))
}

/// A labeled stage-1 candidate of a training scan.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClfSample {
    pub scan_id: String,
    pub center: [usize; 3],
    pub positive: bool,
    /// Diameter of the matched nodule in voxels; 0 for negatives.
    pub diameter_vox: usize,
}

pub const TRAINSET_HEADER: &str = "scan_id,z,y,x,label,diameter_voxels";

/// Label training-scan candidates: positive when inside an annotation's
/// radius. Negatives beyond `max_negatives` are dropped by a seeded draw.
pub fn label_candidates<T: Scalar>(data: &Dataset<T>, candidates: Vec<Candidate>, max_negatives: usize, seed: u64) -> Result<Vec<ClfSample>> {
    let grouped = by_scan(data, candidates)?;
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for i in data.indices(Split::Train) {
        let scan = &data.scans[i];
        let spacing = scan.volume.geometry.mean_spacing();
        for c in &grouped[i] {
            let center = candidate_voxel(scan, c)?;
            let hit = scan.annotations.iter().find(|a| match_candidates(std::slice::from_ref(c), std::slice::from_ref(a), 0.0).hits[0]);
            let sample = ClfSample {
                scan_id: scan.volume.scan_id.clone(),
                center,
                positive: hit.is_some(),
                diameter_vox: hit.map_or(0, |a| ((a.diameter_mm / spacing).round() as usize).max(1)),
            };
            if sample.positive {
                pos.push(sample);
            } else {
                neg.push(sample);
            }
        }
    }
    if max_negatives > 0 && neg.len() > max_negatives {
        let mut keep = rand::seq::index::sample(&mut ChaCha8Rng::seed_from_u64(seed), neg.len(), max_negatives).into_vec();
        keep.sort_unstable();
        neg = keep.into_iter().map(|i| neg[i].clone()).collect();
    }
    pos.extend(neg);
    Ok(pos)
}

fn save_trainset(path: &Path, samples: &[ClfSample]) -> Result<()> {
    let mut text = format!("{TRAINSET_HEADER}\n");
    for s in samples {
        let [z, y, x] = s.center;
        text.push_str(&format!("{},{z},{y},{x},{},{}\n", s.scan_id, u8::from(s.positive), s.diameter_vox));
    }
    write_text(path, &text)
}

/// Geometric copies of the positives, taken round-robin (every positive's
/// first copy, then every second copy, ...) until the positives match
/// `negatives` or the copies run out.
fn balance_positives<T: Scalar>(pos: Vec<ClfPatch<T>>, negatives: usize) -> Result<Vec<ClfPatch<T>>> {
    let mut extra = negatives.saturating_sub(pos.len());
    if extra == 0 {
        return Ok(pos);
    }
    let copies = pos.iter().map(|p| geometric_augment(&p.data)).collect::<Result<Vec<_>>>()?;
    let mut out = pos.clone();
    for k in 1..copies.first().map_or(0, Vec::len) {
        for (p, c) in pos.iter().zip(&copies) {
            if extra == 0 {
                return Ok(out);
            }
            out.push(ClfPatch { data: c[k].clone(), ..p.clone() });
            extra -= 1;
        }
    }
    Ok(out)
}

/// Classifier training patches: labeled candidates, geometric copies of the
/// positives up to class balance and random-mask swaps.
pub fn build_clf_set<T: Scalar>(config: &PipelineConfig, layout: &Layout) -> Result<Vec<ClfPatch<T>>> {
    let data = Dataset::<T>::load(&layout.data)?;
    let dir = layout.stage("clf");
    create_dir(&dir)?;
    let seed = stage_seed(config.seed, "clf-set");
    let candidates = load_candidates(&layout.stage("detect").join("second.csv"))?;
    let samples = label_candidates(&data, candidates, config.clf.max_negatives, item_seed(seed, 0))?;
    save_trainset(&dir.join("trainset.csv"), &samples)?;
    let m = &config.clf.model;
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for s in &samples {
        let i = data.train_index(&s.scan_id)?;
        let data = extract_clf_patch(&data.scans[i].volume, s.center, m.input, m.planar)?;
        let p = ClfPatch { data, positive: s.positive, diameter_vox: s.diameter_vox };
        if s.positive {
            pos.push(p);
        } else {
            neg.push(p);
        }
    }
    if config.clf.geometric_augment {
        pos = balance_positives(pos, neg.len())?;
    }
    ensure(!pos.is_empty() && !neg.is_empty(), || {
        format!("classifier training needs both classes, found {} positive and {} negative candidates", pos.len(), neg.len())
    })?;
    let mut records = Vec::new();
    if config.clf.random_mask {
        let out = random_mask_swap(&pos, &neg, &MaskSwapSpec { fraction: config.clf.mask_fraction, seed: item_seed(seed, 1) })?;
        pos.extend(out.positives);
        neg.extend(out.negatives);
        records = out.records;
    }
    save_swap_manifest(&dir.join("swaps.csv"), &records)?;
    log::info!("classifier set: {} positive, {} negative patches", pos.len(), neg.len());
    pos.extend(neg);
    Ok(pos)
}

/// Train the requested classifier variants on one shared training set.
pub fn train_clf<T: Scalar>(config: &PipelineConfig, layout: &Layout, variants: &[Variant]) -> Result<Vec<(Variant, ClfHistory)>> {
    ensure(!variants.is_empty(), || "no classifier variant requested".into())?;
    let patches = build_clf_set::<T>(config, layout)?;
    let dir = layout.stage("clf");
    let mut out = Vec::new();
    for &v in variants {
        let seed = stage_seed(config.seed, &format!("clf-{v}"));
        let mut model = ClfModel::<T>::new(config.classifier(v), seed)?;
        let spec = ClfTrainSpec { seed: item_seed(seed, 1), ..config.clf.train };
        let start = Instant::now();
        let history = train_classifier(&mut model, &patches, &spec)?;
        log::info!("trained {v} in {:.0} s", start.elapsed().as_secs_f64());
        model.save(&dir.join(format!("{v}.ckpt")))?;
        history.save(&dir.join(format!("{v}_history.csv")))?;
        out.push((v, history));
    }
    let data_ids = load_split(&layout.data)?.into_iter().filter(|(_, s)| *s == Split::Train).map(|(id, _)| id).collect();
    manifest(config, "clf", stage_seed(config.seed, "clf-set"), data_ids).save(&dir)?;
    Ok(out)
}

/// Weighted mean over the trained variants, weights renormalized over them.
pub fn ensemble_of(probs: &[(Variant, f64)], weights: &EnsembleWeights) -> Result<f64> {
    ensure(!probs.is_empty(), || "ensemble of no models".into())?;
    let w = |v: Variant| weights.0[Variant::ALL.iter().position(|&a| a == v).unwrap_or(0)];
    let total: f64 = probs.iter().map(|&(v, _)| w(v)).sum();
    ensure(total > 0.0, || "ensemble weights of the trained variants sum to zero".into())?;
    Ok(probs.iter().map(|&(v, p)| w(v) * p).sum::<f64>() / total)
}

/// One evaluated method: FROC and CPM.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodResult {
    pub name: String,
    pub froc: FrocCurve,
    pub cpm: CpmReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Stage-1 scores, each variant, then the ensemble when several variants ran.
    pub methods: Vec<MethodResult>,
}

impl EvalReport {
    pub fn method(&self, name: &str) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.name == name)
    }

    /// The final score: the ensemble, else the single variant.
    pub fn final_method(&self) -> &MethodResult {
        self.method("ensemble").unwrap_or_else(|| self.methods.last().expect("report has methods"))
    }
}

fn score_method(data: &Dataset<impl Scalar>, grouped: &[Vec<Candidate>], prob: impl Fn(usize, usize) -> f64, name: &str) -> Result<MethodResult> {
    let scans: Vec<ScoredScan> = data
        .indices(Split::Test)
        .into_iter()
        .map(|i| ScoredScan {
            scan_id: data.scans[i].volume.scan_id.clone(),
            annotations: data.scans[i].annotations.clone(),
            candidates: grouped[i].iter().enumerate().map(|(k, c)| Candidate { clf_prob: Some(prob(i, k)), ..c.clone() }).collect(),
        })
        .collect();
    let froc = compute_froc(&scans)?;
    let cpm = compute_cpm(&froc)?;
    Ok(MethodResult { name: name.into(), froc, cpm })
}

/// Score the test-split stage-1 candidates with every trained classifier
/// and their ensemble; writes FROC curves, the scored candidates and the CPM
/// table.
pub fn evaluate<T: Scalar>(config: &PipelineConfig, layout: &Layout) -> Result<EvalReport> {
    let data = Dataset::<T>::load(&layout.data)?;
    let dir = layout.stage("eval");
    create_dir(&dir)?;
    let grouped = by_scan(&data, load_candidates(&layout.stage("detect").join("second.csv"))?)?;
    let m = &config.clf.model;
    // probs[v][scan][candidate]
    let mut probs: Vec<Vec<Vec<f64>>> = Vec::new();
    for &v in &config.clf.variants {
        let model = ClfModel::<T>::load(&layout.stage("clf").join(format!("{v}.ckpt")))?;
        let mut per_scan = vec![Vec::new(); data.scans.len()];
        for i in data.indices(Split::Test) {
            if grouped[i].is_empty() {
                continue;
            }
            let scan = &data.scans[i];
            let patches = grouped[i]
                .iter()
                .map(|c| extract_clf_patch(&scan.volume, candidate_voxel(scan, c)?, m.input, m.planar))
                .collect::<Result<Vec<Tensor<T>>>>()?;
            let p = model.predict_batched(&Tensor::stack(&patches)?, config.clf.batch)?;
            per_scan[i] = p.into_iter().map(|v| v.as_f64().clamp(0.0, 1.0)).collect();
        }
        probs.push(per_scan);
    }
    let variants = &config.clf.variants;
    let mut methods = vec![score_method(&data, &grouped, |i, k| grouped[i][k].seg_score, "stage1")?];
    for (j, v) in variants.iter().enumerate() {
        methods.push(score_method(&data, &grouped, |i, k| probs[j][i][k], v.name())?);
    }
    let ensemble = |i: usize, k: usize| -> Result<f64> {
        let p: Vec<(Variant, f64)> = variants.iter().enumerate().map(|(j, &v)| (v, probs[j][i][k])).collect();
        ensemble_of(&p, &config.ensemble)
    };
    let mut final_probs = vec![Vec::new(); data.scans.len()];
    for i in data.indices(Split::Test) {
        final_probs[i] = (0..grouped[i].len()).map(|k| ensemble(i, k)).collect::<Result<_>>()?;
    }
    if variants.len() > 1 {
        methods.push(score_method(&data, &grouped, |i, k| final_probs[i][k], "ensemble")?);
    }
    for r in &methods {
        save_froc(&dir.join(format!("froc_{}.csv", r.name)), &r.froc)?;
    }
    let scored: Vec<Candidate> = data
        .indices(Split::Test)
        .into_iter()
        .flat_map(|i| grouped[i].iter().zip(&final_probs[i]).map(|(c, &p)| Candidate { clf_prob: Some(p), ..c.clone() }))
        .collect();
    save_candidates(&dir.join("candidates.csv"), &scored)?;
    let rows: Vec<(&str, &CpmReport)> = methods.iter().map(|r| (r.name.as_str(), &r.cpm)).collect();
    write_text(&dir.join("cpm.txt"), &CpmReport::table(&rows))?;
    for r in &methods {
        log::info!("{}: CPM {:.4}", r.name, r.cpm.cpm);
    }
    manifest(config, "eval", 0, data.ids(Split::Test)).save(&dir)?;
    Ok(EvalReport { methods })
}

fn scan_column(path: &Path, column: usize) -> Result<Vec<String>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        out.push(rec?.get(column).unwrap_or_default().to_string());
    }
    Ok(out)
}

/// Check that no test scan fed any training artifact: sampled centers,
/// mined samples, classifier training candidates and training manifests.
pub fn check_split(layout: &Layout) -> Result<()> {
    let test: BTreeSet<String> = load_split(&layout.data)?.into_iter().filter(|(_, s)| *s == Split::Test).map(|(id, _)| id).collect();
    let mut sources: Vec<(PathBuf, Vec<String>)> = Vec::new();
    for (stage, file) in [("sample", "centers.csv"), ("mine", "mined.csv"), ("clf", "trainset.csv")] {
        let path = layout.stage(stage).join(file);
        if path.exists() {
            let ids = scan_column(&path, 0)?;
            sources.push((path, ids));
        }
    }
    for stage in ["sample", "seg", "mine", "clf"] {
        let dir = layout.stage(stage);
        if dir.join("manifest.txt").exists() {
            sources.push((dir.join("manifest.txt"), Manifest::load(&dir)?.scans));
        }
    }
    for (path, ids) in sources {
        if let Some(id) = ids.iter().find(|id| test.contains(*id)) {
            return Err(Error::format(path, format!("test scan `{id}` used for training")));
        }
    }
    Ok(())
}

/// Detection statistics and evaluation of a full run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub passes: Vec<PassStats>,
    pub eval: EvalReport,
}

impl RunReport {
    pub fn pass(&self, split: Split, pass: &str) -> Option<&PassStats> {
        self.passes.iter().find(|s| s.split == split && s.pass == pass)
    }
}

fn timed<R>(stage: &str, f: impl FnOnce() -> Result<R>) -> Result<R> {
    let start = Instant::now();
    let r = f()?;
    log::info!("{stage} finished in {:.1} s", start.elapsed().as_secs_f64());
    Ok(r)
}

/// All stages in order; the dataset is synthesized when absent.
pub fn run_all<T: Scalar>(config: &PipelineConfig, layout: &Layout) -> Result<RunReport> {
    config.validate()?;
    create_dir(&layout.work)?;
    write_text(&layout.work.join("config.txt"), &config.to_text())?;
    if !layout.data.join("split.csv").exists() {
        timed("synth", || synth(config, &layout.data))?;
    }
    timed("sample", || sample::<T>(config, layout))?;
    timed("train-seg", || train_seg::<T>(config, layout))?;
    timed("mine", || mine::<T>(config, layout))?;
    let passes = timed("detect", || detect::<T>(config, layout))?;
    timed("train-clf", || train_clf::<T>(config, layout, &config.clf.variants))?;
    let eval = timed("evaluate", || evaluate::<T>(config, layout))?;
    check_split(layout)?;
    Ok(RunReport { passes, eval })
}

/// The flag grid of an ablation: every combination of the given values.
pub fn ablation_configs(base: &PipelineConfig, pooling: &[Pooling], random_mask: &[bool], hard_mining: &[bool], strategy: &[Strategy]) -> Vec<PipelineConfig> {
    let mut out = Vec::new();
    for &p in pooling {
        for &rm in random_mask {
            for &hm in hard_mining {
                for &s in strategy {
                    let mut c = base.clone();
                    c.clf.model.pooling = p;
                    c.clf.random_mask = rm;
                    c.mining.enabled = hm;
                    c.sampling.strategy = s;
                    out.push(c);
                }
            }
        }
    }
    out
}

/// Run each configuration in `work/<tag>` on one shared dataset and write
/// `work/ablation.csv` with the final CPM row of each.
pub fn ablate<T: Scalar>(configs: &[PipelineConfig], data: &Path, work: &Path) -> Result<Vec<(String, CpmReport)>> {
    ensure(!configs.is_empty(), || "empty ablation grid".into())?;
    create_dir(work)?;
    if !data.join("split.csv").exists() {
        synth(&configs[0], data)?;
    }
    let mut rows = Vec::new();
    for c in configs {
        let tag = c.tag();
        ensure(!rows.iter().any(|(t, _)| *t == tag), || format!("duplicate ablation setting `{tag}`"))?;
        log::info!("ablation run {tag}");
        let report = run_all::<T>(c, &Layout::with_data(data, work.join(&tag)))?;
        rows.push((tag, report.eval.final_method().cpm));
    }
    save_ablation(&work.join("ablation.csv"), &rows)?;
    Ok(rows)
}

/// Mined centers recorded by the mining stage.
pub fn load_mined_centers(layout: &Layout) -> Result<Vec<MinedCenter>> {
    load_mined(&layout.stage("mine").join("mined.csv"))
}

/// FROC and CPM of already scored candidates over `scans`; every candidate
/// and annotation must belong to one of them.
pub fn score_candidates(name: &str, candidates: &[Candidate], annotations: &[NoduleAnnotation], scans: &[String]) -> Result<MethodResult> {
    let known: BTreeSet<&str> = scans.iter().map(String::as_str).collect();
    for id in candidates.iter().map(|c| &c.scan_id).chain(annotations.iter().map(|a| &a.scan_id)) {
        ensure(known.contains(id.as_str()), || format!("scan `{id}` is not in the evaluated set"))?;
    }
    let scored: Vec<ScoredScan> = scans
        .iter()
        .map(|id| ScoredScan {
            scan_id: id.clone(),
            annotations: annotations.iter().filter(|a| a.scan_id == *id).cloned().collect(),
            candidates: candidates.iter().filter(|c| c.scan_id == *id).cloned().collect(),
        })
        .collect();
    let froc = compute_froc(&scored)?;
    let cpm = compute_cpm(&froc)?;
    Ok(MethodResult { name: name.into(), froc, cpm })
}
