//! Plain-text `key = value` configuration with `[section]` headers.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::ct_data::PhantomSpec;
use crate::error::{ensure, Error, Result};
use crate::fprnet::{ClassifierConfig, ClfTrainSpec, EnsembleWeights, Pooling, SeWiring, Variant};
use crate::hard_mining::{HardMiningPolicy, OverlapMetric};
use crate::sampler::{PatchSpec, SamplerConfig, Strategy};
use crate::segnet::{SegModelConfig, SegTrainSpec};
use crate::cascade::WindowSpec;

/// Parsed `section.key = value` entries with their line numbers.
#[derive(Clone, Debug, Default)]
pub struct ConfigDoc {
    entries: Vec<(String, String, u64)>,
}

impl ConfigDoc {
    pub fn parse(text: &str) -> Result<Self> {
        let mut section = String::new();
        let mut entries: Vec<(String, String, u64)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i as u64 + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or(Error::Parse { line: line_no, msg: format!("unterminated section `{line}`") })?;
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(Error::Parse { line: line_no, msg: format!("expected `key = value`, found `{line}`") })?;
            let key = if section.is_empty() { k.trim().to_string() } else { format!("{section}.{}", k.trim()) };
            if entries.iter().any(|(e, _, _)| *e == key) {
                return Err(Error::Parse { line: line_no, msg: format!("duplicate key `{key}`") });
            }
            entries.push((key, v.trim().to_string(), line_no));
        }
        Ok(ConfigDoc { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.find(key).map(|(_, v, _)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _, _)| k.as_str())
    }

    fn find(&self, key: &str) -> Option<&(String, String, u64)> {
        self.entries.iter().find(|(k, _, _)| k == key)
    }

    /// Parse `key` into `slot` when present.
    fn read<V: FromStr>(&self, key: &str, slot: &mut V) -> Result<()> {
        if let Some((_, v, line)) = self.find(key) {
            *slot = v.parse().map_err(|_| Error::Parse { line: *line, msg: format!("bad value `{v}` for `{key}`") })?;
        }
        Ok(())
    }

    fn read_with<V>(&self, key: &str, slot: &mut V, parse: impl Fn(&str) -> Result<V>) -> Result<()> {
        if let Some((_, v, line)) = self.find(key) {
            *slot = parse(v).map_err(|e| Error::Parse { line: *line, msg: format!("`{key}`: {e}") })?;
        }
        Ok(())
    }
}

fn list<V: FromStr>(v: &str) -> Result<Vec<V>> {
    v.split(',')
        .map(|s| s.trim().parse::<V>().map_err(|_| Error::Invalid(format!("bad list item `{}`", s.trim()))))
        .collect()
}

fn join<V: ToString>(v: &[V]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub scans: usize,
    pub train: usize,
    pub phantom: PhantomSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiningConfig {
    pub enabled: bool,
    pub policy: HardMiningPolicy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeConfig {
    pub windows: WindowSpec,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClfStageConfig {
    pub variants: Vec<Variant>,
    /// Architecture template; `variant` is overridden per model.
    pub model: ClassifierConfig,
    pub train: ClfTrainSpec,
    pub geometric_augment: bool,
    pub random_mask: bool,
    pub mask_fraction: f64,
    /// Seeded subsample of candidate negatives; 0 keeps all.
    pub max_negatives: usize,
    pub batch: usize,
}

/// Every knob of a pipeline run.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub sampling: SamplerConfig,
    pub seg_model: SegModelConfig,
    pub seg_train: SegTrainSpec,
    pub mining: MiningConfig,
    pub cascade: CascadeConfig,
    pub clf: ClfStageConfig,
    pub ensemble: EnsembleWeights,
}

impl Default for PipelineConfig {
    /// Desk-scale defaults: small phantoms and networks, one CPU core.
    fn default() -> Self {
        let phantom = PhantomSpec {
            dims: [24, 64, 64],
            wall_thickness: 5,
            diameter_mm: (5.0, 10.0),
            nodule_count: (1, 2),
            vessel_count: (2, 4),
            ..PhantomSpec::default()
        };
        let model = ClassifierConfig { input: 24, channel_divisor: 4, ..ClassifierConfig::new(Variant::SeRes) };
        PipelineConfig {
            seed: 7,
            data: DataConfig { scans: 60, train: 40, phantom },
            sampling: SamplerConfig { patch: PatchSpec { side: 32 }, strategy: Strategy::Proposed, budget_scale: 0.05 },
            seg_model: SegModelConfig { features: [8, 16, 16, 16, 16, 8], dense_units: 3, in_channels: 3 },
            seg_train: SegTrainSpec::default(),
            mining: MiningConfig { enabled: true, policy: HardMiningPolicy { resample_scale: 0.05, ..HardMiningPolicy::default() } },
            cascade: CascadeConfig { windows: WindowSpec { size: 64, stride: 32 }, batch: 16 },
            clf: ClfStageConfig {
                variants: Variant::ALL.to_vec(),
                model,
                train: ClfTrainSpec::default(),
                geometric_augment: true,
                random_mask: true,
                mask_fraction: 0.05,
                max_negatives: 400,
                batch: 32,
            },
            ensemble: EnsembleWeights::default(),
        }
    }
}

const KEYS: &[&str] = &[
    "seed",
    "data.scans",
    "data.train",
    "data.depth",
    "data.height",
    "data.width",
    "data.nodules",
    "data.diameter_mm",
    "data.vessels",
    "data.noise_sigma",
    "data.wall_thickness",
    "sampling.strategy",
    "sampling.patch",
    "sampling.budget_scale",
    "seg.features",
    "seg.dense_units",
    "seg.lr",
    "seg.finetune_lr",
    "seg.batch",
    "seg.max_epochs",
    "seg.patience",
    "seg.val_fraction",
    "seg.eta",
    "mining.enabled",
    "mining.threshold",
    "mining.overlap",
    "mining.rounds",
    "mining.resample_scale",
    "cascade.window",
    "cascade.stride",
    "cascade.batch",
    "clf.variants",
    "clf.input",
    "clf.channel_divisor",
    "clf.planar",
    "clf.pooling",
    "clf.se_wiring",
    "clf.dropout",
    "clf.lr",
    "clf.decay",
    "clf.momentum",
    "clf.epochs",
    "clf.batch",
    "clf.geometric_augment",
    "clf.random_mask",
    "clf.mask_fraction",
    "clf.max_negatives",
    "clf.predict_batch",
    "ensemble.weights",
];

fn pair<V: FromStr + Copy>(v: &str) -> Result<(V, V)> {
    match list::<V>(v)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(Error::Invalid(format!("expected two values, found `{v}`"))),
    }
}

impl PipelineConfig {
    /// Defaults overridden by `text`; unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let doc = ConfigDoc::parse(text)?;
        for key in doc.keys() {
            if !KEYS.contains(&key) {
                let line = doc.find(key).map_or(0, |e| e.2);
                return Err(Error::Parse { line, msg: format!("unknown key `{key}`") });
            }
        }
        let mut c = PipelineConfig::default();
        doc.read("seed", &mut c.seed)?;
        doc.read("data.scans", &mut c.data.scans)?;
        doc.read("data.train", &mut c.data.train)?;
        let p = &mut c.data.phantom;
        doc.read("data.depth", &mut p.dims[0])?;
        doc.read("data.height", &mut p.dims[1])?;
        doc.read("data.width", &mut p.dims[2])?;
        doc.read_with("data.nodules", &mut p.nodule_count, pair)?;
        doc.read_with("data.diameter_mm", &mut p.diameter_mm, pair)?;
        doc.read_with("data.vessels", &mut p.vessel_count, pair)?;
        doc.read("data.noise_sigma", &mut p.noise_sigma)?;
        doc.read("data.wall_thickness", &mut p.wall_thickness)?;
        doc.read("sampling.strategy", &mut c.sampling.strategy)?;
        doc.read_with("sampling.patch", &mut c.sampling.patch, |v| PatchSpec::new(v.parse().map_err(|_| Error::Invalid(v.into()))?))?;
        doc.read("sampling.budget_scale", &mut c.sampling.budget_scale)?;
        doc.read_with("seg.features", &mut c.seg_model.features, |v| {
            list::<usize>(v)?.try_into().map_err(|_| Error::Invalid("expected six feature counts".into()))
        })?;
        doc.read("seg.dense_units", &mut c.seg_model.dense_units)?;
        let s = &mut c.seg_train;
        doc.read("seg.lr", &mut s.lr)?;
        doc.read("seg.finetune_lr", &mut s.finetune_lr)?;
        doc.read("seg.batch", &mut s.batch_size)?;
        doc.read("seg.max_epochs", &mut s.max_epochs)?;
        doc.read("seg.patience", &mut s.patience)?;
        doc.read("seg.val_fraction", &mut s.val_fraction)?;
        doc.read("seg.eta", &mut s.dice.eta)?;
        doc.read("mining.enabled", &mut c.mining.enabled)?;
        doc.read("mining.threshold", &mut c.mining.policy.threshold)?;
        doc.read::<OverlapMetric>("mining.overlap", &mut c.mining.policy.overlap)?;
        doc.read("mining.rounds", &mut c.mining.policy.rounds)?;
        doc.read("mining.resample_scale", &mut c.mining.policy.resample_scale)?;
        doc.read("cascade.window", &mut c.cascade.windows.size)?;
        doc.read("cascade.stride", &mut c.cascade.windows.stride)?;
        doc.read("cascade.batch", &mut c.cascade.batch)?;
        let k = &mut c.clf;
        doc.read_with("clf.variants", &mut k.variants, list::<Variant>)?;
        doc.read("clf.input", &mut k.model.input)?;
        doc.read("clf.channel_divisor", &mut k.model.channel_divisor)?;
        doc.read("clf.planar", &mut k.model.planar)?;
        doc.read::<Pooling>("clf.pooling", &mut k.model.pooling)?;
        doc.read_with("clf.se_wiring", &mut k.model.se_wiring, |v| match v {
            "after_sum" => Ok(SeWiring::AfterSum),
            "branch" => Ok(SeWiring::Branch),
            _ => Err(Error::Invalid(format!("unknown SE wiring `{v}`"))),
        })?;
        doc.read("clf.dropout", &mut k.model.dropout)?;
        doc.read("clf.lr", &mut k.train.lr)?;
        doc.read("clf.decay", &mut k.train.decay)?;
        doc.read("clf.momentum", &mut k.train.momentum)?;
        doc.read("clf.epochs", &mut k.train.epochs)?;
        doc.read("clf.batch", &mut k.train.batch_size)?;
        doc.read("clf.geometric_augment", &mut k.geometric_augment)?;
        doc.read("clf.random_mask", &mut k.random_mask)?;
        doc.read("clf.mask_fraction", &mut k.mask_fraction)?;
        doc.read("clf.max_negatives", &mut k.max_negatives)?;
        doc.read("clf.predict_batch", &mut k.batch)?;
        doc.read_with("ensemble.weights", &mut c.ensemble, |v| {
            let w: Vec<f64> = list(v)?;
            EnsembleWeights::new(w.try_into().map_err(|_| Error::Invalid("expected three weights".into()))?)
        })?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PipelineConfig::from_text(&text).map_err(|e| match e {
            Error::Parse { line, msg } => Error::format(path, format!("line {line}: {msg}")),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.data.train >= 1 && self.data.train < self.data.scans, || {
            format!("train count {} must be in [1, {})", self.data.train, self.data.scans)
        })?;
        self.data.phantom.validate()?;
        ensure(self.sampling.budget_scale > 0.0, || "sampling budget scale must be positive".into())?;
        self.seg_model.validate()?;
        self.seg_train.validate()?;
        self.mining.policy.validate()?;
        self.cascade.windows.validate()?;
        ensure(self.cascade.batch > 0 && self.clf.batch > 0, || "batch sizes must be positive".into())?;
        ensure(!self.clf.variants.is_empty(), || "at least one classifier variant is required".into())?;
        self.clf.model.validate()?;
        self.clf.train.validate()?;
        ensure(self.clf.mask_fraction > 0.0 && self.clf.mask_fraction <= 1.0, || "mask fraction must be in (0, 1]".into())?;
        EnsembleWeights::new(self.ensemble.0).map(|_| ())
    }

    /// Fully resolved echo; `from_text(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let p = &self.data.phantom;
        let s = &self.seg_train;
        let k = &self.clf;
        let mut o = String::new();
        let _ = writeln!(o, "seed = {}", self.seed);
        let _ = writeln!(o, "\n[data]");
        let _ = writeln!(o, "scans = {}\ntrain = {}", self.data.scans, self.data.train);
        let _ = writeln!(o, "depth = {}\nheight = {}\nwidth = {}", p.dims[0], p.dims[1], p.dims[2]);
        let _ = writeln!(o, "nodules = {},{}", p.nodule_count.0, p.nodule_count.1);
        let _ = writeln!(o, "diameter_mm = {},{}", p.diameter_mm.0, p.diameter_mm.1);
        let _ = writeln!(o, "vessels = {},{}", p.vessel_count.0, p.vessel_count.1);
        let _ = writeln!(o, "noise_sigma = {}\nwall_thickness = {}", p.noise_sigma, p.wall_thickness);
        let _ = writeln!(o, "\n[sampling]");
        let _ = writeln!(o, "strategy = {}", self.sampling.strategy.name());
        let _ = writeln!(o, "patch = {}\nbudget_scale = {}", self.sampling.patch.side, self.sampling.budget_scale);
        let _ = writeln!(o, "\n[seg]");
        let _ = writeln!(o, "features = {}\ndense_units = {}", join(&self.seg_model.features), self.seg_model.dense_units);
        let _ = writeln!(o, "lr = {}\nfinetune_lr = {}\nbatch = {}", s.lr, s.finetune_lr, s.batch_size);
        let _ = writeln!(o, "max_epochs = {}\npatience = {}\nval_fraction = {}\neta = {}", s.max_epochs, s.patience, s.val_fraction, s.dice.eta);
        let _ = writeln!(o, "\n[mining]");
        let overlap = match self.mining.policy.overlap {
            OverlapMetric::Iou => "iou",
            OverlapMetric::Dice => "dice",
        };
        let _ = writeln!(o, "enabled = {}\nthreshold = {}\noverlap = {overlap}\nrounds = {}", self.mining.enabled, self.mining.policy.threshold, self.mining.policy.rounds);
        let _ = writeln!(o, "resample_scale = {}", self.mining.policy.resample_scale);
        let _ = writeln!(o, "\n[cascade]");
        let _ = writeln!(o, "window = {}\nstride = {}\nbatch = {}", self.cascade.windows.size, self.cascade.windows.stride, self.cascade.batch);
        let _ = writeln!(o, "\n[clf]");
        let _ = writeln!(o, "variants = {}", join(&k.variants));
        let m = &k.model;
        let wiring = match m.se_wiring {
            SeWiring::AfterSum => "after_sum",
            SeWiring::Branch => "branch",
        };
        let _ = writeln!(o, "input = {}\nchannel_divisor = {}\nplanar = {}", m.input, m.channel_divisor, m.planar);
        let _ = writeln!(o, "pooling = {}\nse_wiring = {wiring}\ndropout = {}", m.pooling.name(), m.dropout);
        let t = &k.train;
        let _ = writeln!(o, "lr = {}\ndecay = {}\nmomentum = {}\nepochs = {}\nbatch = {}", t.lr, t.decay, t.momentum, t.epochs, t.batch_size);
        let _ = writeln!(o, "geometric_augment = {}\nrandom_mask = {}\nmask_fraction = {}", k.geometric_augment, k.random_mask, k.mask_fraction);
        let _ = writeln!(o, "max_negatives = {}\npredict_batch = {}", k.max_negatives, k.batch);
        let _ = writeln!(o, "\n[ensemble]");
        let _ = writeln!(o, "weights = {}", join(&self.ensemble.0));
        o
    }

    /// Classifier architecture for one variant.
    pub fn classifier(&self, variant: Variant) -> ClassifierConfig {
        ClassifierConfig { variant, ..self.clf.model.clone() }
    }

    /// Table-style tag of the ablation flags, e.g. `dense_DP_RM-RDU_HM`.
    pub fn tag(&self) -> String {
        let m = &self.clf.model;
        let mut s = String::new();
        if m.planar {
            s.push_str("2D");
        }
        s.push_str(&join(&self.clf.variants).replace(',', "+"));
        s.push('_');
        s.push_str(match m.pooling {
            Pooling::Max => "MP",
            Pooling::Central => "CP",
            Pooling::Dual => "DP",
        });
        if self.clf.random_mask {
            s.push_str("_RM");
        }
        s.push_str(match self.sampling.strategy {
            Strategy::Proposed => "-PSS",
            Strategy::Uniform => "-WSS",
        });
        if self.mining.enabled {
            s.push_str("_HM");
        }
        s
    }
}
