use std::path::Path;

use nodet_tensor::checkpoint;
use nodet_tensor::ops::loss::PROB_CLAMP;
use nodet_tensor::nn::{BnActConv, Conv, ConvTranspose};
use nodet_tensor::{AxisWindows, Graph, ParamStore, PoolPlan, Shape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Error, Result};
use crate::Scalar;

/// Anything that maps `[n, 3, 1, H, W]` slabs to `[n, 1, 1, H, W]`
/// center-slice probabilities. Stubs implement it in tests.
pub trait SliceSegmenter<T: Scalar> {
    fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>>;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegModelConfig {
    pub features: [usize; 6],
    pub dense_units: usize,
    pub in_channels: usize,
}

impl Default for SegModelConfig {
    fn default() -> Self {
        SegModelConfig { features: [8, 16, 32, 32, 16, 8], dense_units: 6, in_channels: 3 }
    }
}

impl SegModelConfig {
    pub fn validate(&self) -> Result<()> {
        let f = self.features;
        ensure(f.iter().all(|&n| n > 0) && f[0] == f[5] && f[1] == f[4] && f[2] == f[3], || {
            format!("feature counts {f:?} must be positive and symmetric")
        })?;
        ensure(self.dense_units > 0 && self.in_channels > 0, || "empty block".into())
    }

    /// `key=value` echo stored in checkpoints.
    pub fn to_echo(&self) -> String {
        let f = self.features.map(|v| v.to_string()).join(",");
        format!("model=seg\nfeatures={f}\ndense_units={}\nin_channels={}", self.dense_units, self.in_channels)
    }

    pub fn from_echo(text: &str) -> Result<Self> {
        let mut cfg = SegModelConfig::default();
        let mut kind = None;
        for line in text.lines() {
            let Some((k, v)) = line.split_once('=') else { continue };
            let bad = || Error::Invalid(format!("checkpoint config `{line}`"));
            match k.trim() {
                "model" => kind = Some(v.trim().to_string()),
                "features" => {
                    let f: Vec<usize> = v.split(',').map(|s| s.trim().parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
                    cfg.features = f.try_into().map_err(|_| bad())?;
                }
                "dense_units" => cfg.dense_units = v.trim().parse().map_err(|_| bad())?,
                "in_channels" => cfg.in_channels = v.trim().parse().map_err(|_| bad())?,
                _ => {}
            }
        }
        ensure(kind.as_deref() == Some("seg"), || "checkpoint does not hold a segmentation model".into())?;
        cfg.validate()?;
        Ok(cfg)
    }
}

const K3: [usize; 3] = [1, 3, 3];
const K1: [usize; 3] = [1, 1, 1];
const LINEAR_GAIN: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// 1x1 projection to `n`, dense units each adding `n` maps, 1x1 fusion back
/// to `n`, plus the projected input.
#[derive(Clone, Debug)]
pub struct ResDenseBlock {
    proj: Conv,
    units: Vec<BnActConv>,
    fuse: Conv,
    pub features: usize,
}

impl ResDenseBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, n: usize, units: usize, rng: &mut ChaCha8Rng) -> Self {
        let proj = Conv::new(store, &format!("{name}.proj"), cin, n, K1, true, rng);
        let units = (0..units)
            .map(|i| BnActConv::new(store, &format!("{name}.unit{i}"), n * (i + 1), n, K3, rng))
            .collect::<Vec<_>>();
        let fuse = Conv::new(store, &format!("{name}.fuse"), n * (units.len() + 1), n, K1, true, rng);
        // Projections are linear; keep their output variance at the input's.
        proj.rescale(store, LINEAR_GAIN);
        fuse.rescale(store, LINEAR_GAIN);
        ResDenseBlock { proj, units, fuse, features: n }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let p = self.proj.forward(g, store, x)?;
        let mut cat = p.clone();
        for u in &self.units {
            let y = u.forward(g, store, &cat)?;
            cat = g.concat(&[&cat, &y])?;
        }
        let f = self.fuse.forward(g, store, &cat)?;
        Ok(g.add(&f, &p)?)
    }
}

/// Encoder-decoder with three 3x3/2 max-pools, three 3x3/2 deconvolutions
/// and skip concatenation; sigmoid output for the center slice.
#[derive(Clone, Debug)]
pub struct SegModel<T> {
    pub config: SegModelConfig,
    pub store: ParamStore<T>,
    blocks: Vec<ResDenseBlock>,
    ups: Vec<ConvTranspose>,
    head: Conv,
}

impl<T: Scalar> SegModel<T> {
    pub fn new(config: SegModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let f = config.features;
        let u = config.dense_units;
        let mut blocks = Vec::with_capacity(6);
        blocks.push(ResDenseBlock::new(&mut store, "enc1", config.in_channels, f[0], u, &mut rng));
        blocks.push(ResDenseBlock::new(&mut store, "enc2", f[0], f[1], u, &mut rng));
        blocks.push(ResDenseBlock::new(&mut store, "enc3", f[1], f[2], u, &mut rng));
        let ups = vec![
            ConvTranspose::new(&mut store, "up4", f[2], f[2], K3, [1, 2, 2], true, &mut rng),
            ConvTranspose::new(&mut store, "up5", f[3], f[3], K3, [1, 2, 2], true, &mut rng),
            ConvTranspose::new(&mut store, "up6", f[4], f[4], K3, [1, 2, 2], true, &mut rng),
        ];
        blocks.push(ResDenseBlock::new(&mut store, "dec4", f[2] + f[2], f[3], u, &mut rng));
        blocks.push(ResDenseBlock::new(&mut store, "dec5", f[3] + f[1], f[4], u, &mut rng));
        blocks.push(ResDenseBlock::new(&mut store, "dec6", f[4] + f[0], f[5], u, &mut rng));
        let head = Conv::new(&mut store, "head", f[5], 1, K1, true, &mut rng);
        head.rescale(&mut store, LINEAR_GAIN);
        Ok(SegModel { config, store, blocks, ups, head })
    }

    pub fn block_features(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.features).collect()
    }

    fn pool(x: &Var<T>, g: &Graph<T>) -> Result<Var<T>> {
        let [d, h, w] = x.shape().dims();
        let plan = PoolPlan::new(AxisWindows::identity(d), AxisWindows::strided_same(h, 3, 2), AxisWindows::strided_same(w, 3, 2));
        Ok(g.max_pool(x, &plan)?)
    }

    /// `x`: `[n, 3, 1, H, W]` with even `H`, `W`. Returns probabilities
    /// `[n, 1, 1, H, W]`.
    pub fn forward(&self, g: &Graph<T>, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        ensure(s.c == self.config.in_channels && s.d == 1, || format!("segmentation input {s} must be [n, {}, 1, H, W]", self.config.in_channels))?;
        ensure(s.h.is_multiple_of(2) && s.w.is_multiple_of(2) && s.h >= 2 && s.w >= 2, || format!("in-plane size {}x{} must be even", s.h, s.w))?;
        let st = &self.store;
        let e1 = self.blocks[0].forward(g, st, x)?;
        let e2 = self.blocks[1].forward(g, st, &Self::pool(&e1, g)?)?;
        let e3 = self.blocks[2].forward(g, st, &Self::pool(&e2, g)?)?;
        let mut y = Self::pool(&e3, g)?;
        for (i, skip) in [&e3, &e2, &e1].into_iter().enumerate() {
            let up = self.ups[i].forward(g, st, &y)?;
            let up = if up.shape().dims() == skip.shape().dims() { up } else { g.crop(&up, [0, 0, 0], skip.shape().dims())? };
            let cat = g.concat(&[&up, skip])?;
            y = self.blocks[3 + i].forward(g, st, &cat)?;
        }
        let logits = self.head.forward(g, st, &y)?;
        Ok(open_sigmoid(g, &logits))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(checkpoint::save(path, &self.config.to_echo(), &self.store)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let archive = checkpoint::load::<T>(path)?;
        let config = SegModelConfig::from_echo(&archive.config)?;
        let mut model = SegModel::new(config, 0)?;
        model.store.load_named(archive.tensors)?;
        Ok(model)
    }
}

/// Sigmoid kept strictly inside (0,1): values are clamped to
/// `[PROB_CLAMP, 1 - PROB_CLAMP]` so saturated single-precision logits do not
/// round to 0 or 1. The gradient is the unclamped sigmoid derivative.
fn open_sigmoid<T: Scalar>(g: &Graph<T>, x: &Var<T>) -> Var<T> {
    let (lo, hi) = (T::lit(PROB_CLAMP), T::lit(1.0 - PROB_CLAMP));
    let s = x.value().map(|v| T::one() / (T::one() + (-v).exp()));
    let y = s.map(|v| v.max(lo).min(hi));
    g.record(y, &[x], move |dy, _| {
        let mut dx = dy.clone();
        for (d, &v) in dx.data_mut().iter_mut().zip(s.data()) {
            *d *= v * (T::one() - v);
        }
        vec![Some(dx)]
    })
}

impl<T: Scalar> SliceSegmenter<T> for SegModel<T> {
    fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::inference();
        let x = g.constant(input.clone());
        Ok(self.forward(&g, &x)?.into_tensor())
    }
}

/// Predict in chunks of `batch` items to bound memory.
pub fn predict_batched<T: Scalar, M: SliceSegmenter<T> + ?Sized>(model: &M, input: &Tensor<T>, batch: usize) -> Result<Tensor<T>> {
    let n = input.shape().n;
    let mut parts = Vec::new();
    let mut i = 0;
    while i < n {
        let k = batch.max(1).min(n - i);
        parts.push(model.predict(&input.slice_items(i, k))?);
        i += k;
    }
    if parts.is_empty() {
        return Ok(Tensor::zeros(Shape::new(0, 1, 1, input.shape().h, input.shape().w)));
    }
    Ok(Tensor::stack(&parts)?)
}
