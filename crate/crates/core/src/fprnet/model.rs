use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nodet_tensor::nn::{ConvBnAct, Linear};
use nodet_tensor::{checkpoint, AxisWindows, Graph, ParamStore, PoolPlan, Shape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::pool::{dual_pool, dual_pool_plan};
use super::se::SeGate;
use crate::error::{ensure, Error, Result};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    SeRes,
    Dense,
    Incep,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::SeRes, Variant::Dense, Variant::Incep];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SeRes => "seres",
            Variant::Dense => "dense",
            Variant::Incep => "incep",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "seres" => Ok(Variant::SeRes),
            "dense" => Ok(Variant::Dense),
            "incep" => Ok(Variant::Incep),
            other => Err(Error::Invalid(format!("unknown classifier variant `{other}`"))),
        }
    }
}

/// Downsampling operator between block groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    /// 2x2x2 max pooling, stride 2.
    Max,
    /// Central pooling alone.
    Central,
    /// Central pooling concatenated with central cropping (doubles channels).
    Dual,
}

impl Pooling {
    pub fn name(self) -> &'static str {
        match self {
            Pooling::Max => "max",
            Pooling::Central => "central",
            Pooling::Dual => "dual",
        }
    }

    /// Channel multiplier of the operator.
    pub fn widen(self) -> usize {
        if self == Pooling::Dual {
            2
        } else {
            1
        }
    }

    pub fn apply<T: Scalar>(self, g: &Graph<T>, x: &Var<T>) -> Result<Var<T>> {
        if self == Pooling::Dual {
            return dual_pool(g, x);
        }
        let (plan, _, _) = dual_pool_plan(x.shape().dims())?;
        let plan = match self {
            Pooling::Central => plan,
            _ => {
                let [d, h, w] = x.shape().dims();
                let axis = |n: usize| if n == 1 { AxisWindows::identity(1) } else { AxisWindows::strided_same(n, 2, 2) };
                PoolPlan::new(axis(d), axis(h), axis(w))
            }
        };
        Ok(g.max_pool(x, &plan)?)
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "max" => Ok(Pooling::Max),
            "central" => Ok(Pooling::Central),
            "dual" => Ok(Pooling::Dual),
            other => Err(Error::Invalid(format!("unknown pooling `{other}`"))),
        }
    }
}

/// Where the squeeze-excitation gate sits in a residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeWiring {
    /// `SE(x + F(x))`.
    AfterSum,
    /// `x + SE(F(x))`.
    Branch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub variant: Variant,
    /// Cube edge of the input patch.
    pub input: usize,
    /// Planar variant: `[1, input, input]` slices and `[1, 3, 3]` kernels.
    pub planar: bool,
    /// Every channel width is divided by this (desk-scale runs).
    pub channel_divisor: usize,
    pub se_wiring: SeWiring,
    pub pooling: Pooling,
    pub dropout: f64,
}

impl ClassifierConfig {
    pub fn new(variant: Variant) -> Self {
        ClassifierConfig { variant, input: 40, planar: false, channel_divisor: 1, se_wiring: SeWiring::AfterSum, pooling: Pooling::Dual, dropout: 0.2 }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.input.is_multiple_of(8) && self.input >= 16, || format!("input edge {} must be a multiple of 8, at least 16", self.input))?;
        ensure(self.channel_divisor >= 1, || "channel divisor must be >= 1".into())?;
        ensure((0.0..1.0).contains(&self.dropout), || format!("dropout {} outside [0, 1)", self.dropout))
    }

    pub fn input_dims(&self) -> [usize; 3] {
        let n = self.input;
        if self.planar {
            [1, n, n]
        } else {
            [n, n, n]
        }
    }

    fn width(&self, c: usize) -> usize {
        (c / self.channel_divisor).max(1)
    }

    fn kernel(&self) -> [usize; 3] {
        if self.planar {
            [1, 3, 3]
        } else {
            [3, 3, 3]
        }
    }

    pub fn to_echo(&self) -> String {
        format!(
            "model=clf\nvariant={}\ninput={}\nplanar={}\nchannel_divisor={}\nse_wiring={}\npooling={}\ndropout={}",
            self.variant,
            self.input,
            self.planar,
            self.channel_divisor,
            match self.se_wiring {
                SeWiring::AfterSum => "after_sum",
                SeWiring::Branch => "branch",
            },
            self.pooling.name(),
            self.dropout
        )
    }

    pub fn from_echo(text: &str) -> Result<Self> {
        let mut cfg = ClassifierConfig::new(Variant::SeRes);
        let mut kind = None;
        for line in text.lines() {
            let Some((k, v)) = line.split_once('=') else { continue };
            let v = v.trim();
            let bad = || Error::Invalid(format!("checkpoint config `{line}`"));
            match k.trim() {
                "model" => kind = Some(v.to_string()),
                "variant" => cfg.variant = v.parse()?,
                "input" => cfg.input = v.parse().map_err(|_| bad())?,
                "planar" => cfg.planar = v.parse().map_err(|_| bad())?,
                "channel_divisor" => cfg.channel_divisor = v.parse().map_err(|_| bad())?,
                "dropout" => cfg.dropout = v.parse().map_err(|_| bad())?,
                "pooling" => cfg.pooling = v.parse()?,
                "se_wiring" => {
                    cfg.se_wiring = match v {
                        "after_sum" => SeWiring::AfterSum,
                        "branch" => SeWiring::Branch,
                        _ => return Err(bad()),
                    }
                }
                _ => {}
            }
        }
        ensure(kind.as_deref() == Some("clf"), || "checkpoint does not hold a classifier".into())?;
        cfg.validate()?;
        Ok(cfg)
    }
}

const K1: [usize; 3] = [1, 1, 1];

/// Bottleneck residual block with a squeeze-excitation gate.
#[derive(Clone, Debug)]
struct SeResBlock {
    convs: [ConvBnAct; 3],
    shortcut: Option<ConvBnAct>,
    se: SeGate,
    wiring: SeWiring,
}

impl SeResBlock {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        (a, b, s): (usize, usize, usize),
        kernel: [usize; 3],
        wiring: SeWiring,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let convs = [
            ConvBnAct::new(store, &format!("{name}.c1"), cin, a, K1, rng),
            ConvBnAct::new(store, &format!("{name}.c2"), a, a, kernel, rng),
            ConvBnAct::new(store, &format!("{name}.c3"), a, b, K1, rng),
        ];
        let shortcut = (cin != b).then(|| ConvBnAct::new(store, &format!("{name}.short"), cin, b, K1, rng));
        let se = SeGate::new(store, &format!("{name}.se"), b, s.min(b - 1).max(1), rng)?;
        Ok(SeResBlock { convs, shortcut, se, wiring })
    }

    fn forward<T: Scalar>(&self, g: &Graph<T>, st: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let mut f = x.clone();
        for c in &self.convs {
            f = c.forward(g, st, &f)?;
        }
        let skip = match &self.shortcut {
            Some(p) => p.forward(g, st, x)?,
            None => x.clone(),
        };
        match self.wiring {
            SeWiring::AfterSum => self.se.forward(g, st, &g.add(&skip, &f)?),
            SeWiring::Branch => Ok(g.add(&skip, &self.se.forward(g, st, &f)?)?),
        }
    }
}

/// Dropout -> conv (growth maps) -> BN -> PReLU, concatenated onto the input.
#[derive(Clone, Debug)]
struct DenseLayer {
    conv: ConvBnAct,
    dropout: f64,
}

impl DenseLayer {
    fn forward<T: Scalar>(&self, g: &Graph<T>, st: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.conv.forward(g, st, &g.dropout(x, self.dropout))?;
        Ok(g.concat(&[x, &y])?)
    }
}

/// Three branches (1x1; 1x1 -> 3x3x3; stride-1 3x3x3 max-pool) merged by a
/// 1x1 conv to `q` maps.
#[derive(Clone, Debug)]
struct IncepBlock {
    a: ConvBnAct,
    b: [ConvBnAct; 2],
    merge: ConvBnAct,
    planar: bool,
}

impl IncepBlock {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, (p, q): (usize, usize), kernel: [usize; 3], rng: &mut ChaCha8Rng) -> Self {
        IncepBlock {
            a: ConvBnAct::new(store, &format!("{name}.a"), cin, p, K1, rng),
            b: [ConvBnAct::new(store, &format!("{name}.b1"), cin, p, K1, rng), ConvBnAct::new(store, &format!("{name}.b2"), p, p, kernel, rng)],
            merge: ConvBnAct::new(store, &format!("{name}.merge"), 2 * p + cin, q, K1, rng),
            planar: kernel[0] == 1,
        }
    }

    fn forward<T: Scalar>(&self, g: &Graph<T>, st: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let ya = self.a.forward(g, st, x)?;
        let yb = self.b[1].forward(g, st, &self.b[0].forward(g, st, x)?)?;
        let [d, h, w] = x.shape().dims();
        let dz = if self.planar { AxisWindows::identity(d) } else { AxisWindows::strided_same(d, 3, 1) };
        let plan = PoolPlan::new(dz, AxisWindows::strided_same(h, 3, 1), AxisWindows::strided_same(w, 3, 1));
        let yc = g.max_pool(x, &plan)?;
        let cat = g.concat(&[&ya, &yb, &yc])?;
        Ok(self.merge.forward(g, st, &cat)?)
    }
}

#[derive(Clone, Debug)]
enum Block {
    SeRes(SeResBlock),
    Dense(DenseLayer),
    Incep(IncepBlock),
}

impl Block {
    fn forward<T: Scalar>(&self, g: &Graph<T>, st: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        match self {
            Block::SeRes(b) => b.forward(g, st, x),
            Block::Dense(b) => b.forward(g, st, x),
            Block::Incep(b) => b.forward(g, st, x),
        }
    }
}

/// One downsampling step followed by a block group. `before` runs ahead of
/// the pooling (dense transitions), `after` restores the channel budget.
#[derive(Clone, Debug)]
struct Stage {
    pooling: Pooling,
    before: Option<ConvBnAct>,
    after: Option<ConvBnAct>,
    blocks: Vec<Block>,
    out_channels: usize,
}

impl Stage {
    fn forward<T: Scalar>(&self, g: &Graph<T>, st: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let mut y = x.clone();
        if let Some(c) = &self.before {
            y = c.forward(g, st, &y)?;
        }
        y = self.pooling.apply(g, &y)?;
        if let Some(c) = &self.after {
            y = c.forward(g, st, &y)?;
        }
        for b in &self.blocks {
            y = b.forward(g, st, &y)?;
        }
        Ok(y)
    }
}

/// Three-stage 3D classifier: stem, three dual-pool stages, global average
/// pooling, 2-way affine head and softmax.
#[derive(Clone, Debug)]
pub struct ClfModel<T> {
    pub config: ClassifierConfig,
    pub store: ParamStore<T>,
    stem: [ConvBnAct; 2],
    stages: Vec<Stage>,
    head: Linear,
}

impl<T: Scalar> ClfModel<T> {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let k = config.kernel();
        let c0 = config.width(32);
        let stem = [
            ConvBnAct::new(&mut store, "stem1", 1, c0, k, &mut rng),
            ConvBnAct::new(&mut store, "stem2", c0, c0, k, &mut rng),
        ];
        let mut stages = Vec::with_capacity(3);
        let mut c = c0;
        let pooling = config.pooling;
        let widen = pooling.widen();
        let restore = |store: &mut ParamStore<T>, i: usize, c: usize, rng: &mut ChaCha8Rng| {
            (widen > 1).then(|| ConvBnAct::new(store, &format!("dp{i}.restore"), widen * c, c, K1, rng))
        };
        match config.variant {
            Variant::SeRes => {
                let groups = [((32, 64, 8), 3), ((48, 96, 12), 6), ((64, 128, 16), 3)];
                for (i, ((a, b, s), count)) in groups.into_iter().enumerate() {
                    let (a, b, s) = (config.width(a), config.width(b), config.width(s));
                    let after = restore(&mut store, i, c, &mut rng);
                    let mut blocks = Vec::with_capacity(count);
                    for j in 0..count {
                        let cin = if j == 0 { c } else { b };
                        let blk = SeResBlock::new(&mut store, &format!("g{i}.b{j}"), cin, (a, b, s), k, config.se_wiring, &mut rng)?;
                        blocks.push(Block::SeRes(blk));
                    }
                    stages.push(Stage { pooling, before: None, after, blocks, out_channels: b });
                    c = b;
                }
            }
            Variant::Dense => {
                let growth = config.width(32);
                for (i, count) in [2usize, 4, 2].into_iter().enumerate() {
                    let reduced = (c / widen).max(1);
                    let before = ConvBnAct::new(&mut store, &format!("t{i}"), c, reduced, K1, &mut rng);
                    c = widen * reduced;
                    let mut blocks = Vec::with_capacity(count);
                    for j in 0..count {
                        let conv = ConvBnAct::new(&mut store, &format!("g{i}.l{j}"), c, growth, k, &mut rng);
                        blocks.push(Block::Dense(DenseLayer { conv, dropout: config.dropout }));
                        c += growth;
                    }
                    stages.push(Stage { pooling, before: Some(before), after: None, blocks, out_channels: c });
                }
            }
            Variant::Incep => {
                for (i, (p, q)) in [(16, 64), (24, 96), (32, 128)].into_iter().enumerate() {
                    let (p, q) = (config.width(p), config.width(q));
                    let after = restore(&mut store, i, c, &mut rng);
                    let mut blocks = Vec::with_capacity(3);
                    for j in 0..3 {
                        let cin = if j == 0 { c } else { q };
                        blocks.push(Block::Incep(IncepBlock::new(&mut store, &format!("g{i}.b{j}"), cin, (p, q), k, &mut rng)));
                    }
                    stages.push(Stage { pooling, before: None, after, blocks, out_channels: q });
                    c = q;
                }
            }
        }
        let head = Linear::new(&mut store, "fc", c, 2, &mut rng);
        Ok(ClfModel { config, store, stem, stages, head })
    }

    /// Output channels of each block group.
    pub fn group_channels(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.out_channels).collect()
    }

    /// Number of convolution layers, excluding the affine head and SE gates.
    pub fn conv_layers(&self) -> usize {
        let per_block = |b: &Block| match b {
            Block::SeRes(s) => 3 + usize::from(s.shortcut.is_some()),
            Block::Dense(_) => 1,
            Block::Incep(_) => 4,
        };
        2 + self
            .stages
            .iter()
            .map(|s| usize::from(s.before.is_some()) + usize::from(s.after.is_some()) + s.blocks.iter().map(per_block).sum::<usize>())
            .sum::<usize>()
    }

    /// Feature map ahead of global average pooling.
    pub fn features(&self, g: &Graph<T>, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        let want = self.config.input_dims();
        ensure(s.c == 1 && s.dims() == want, || format!("classifier input {s} must be [n, 1, {}, {}, {}]", want[0], want[1], want[2]))?;
        let st = &self.store;
        let mut y = x.clone();
        for c in &self.stem {
            y = c.forward(g, st, &y)?;
        }
        for stage in &self.stages {
            y = stage.forward(g, st, &y)?;
        }
        Ok(y)
    }

    /// Softmax pair `[n, 2, 1, 1, 1]`; channel 1 is the nodule class.
    pub fn forward(&self, g: &Graph<T>, x: &Var<T>) -> Result<Var<T>> {
        let f = self.features(g, x)?;
        let logits = self.head.forward(g, &self.store, &g.global_avg_pool(&f))?;
        Ok(g.softmax(&logits))
    }

    /// Nodule probabilities for `[n, 1, D, H, W]` patches.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Vec<T>> {
        let g = Graph::inference();
        let x = g.constant(input.clone());
        let p = self.forward(&g, &x)?.into_tensor();
        Ok((0..p.shape().n).map(|n| p.item(n)[1]).collect())
    }

    /// Like [`predict`](Self::predict), `batch` items at a time.
    pub fn predict_batched(&self, input: &Tensor<T>, batch: usize) -> Result<Vec<T>> {
        let n = input.shape().n;
        let mut out = Vec::with_capacity(n);
        let mut i = 0;
        while i < n {
            let k = batch.max(1).min(n - i);
            out.extend(self.predict(&input.slice_items(i, k))?);
            i += k;
        }
        Ok(out)
    }

    pub fn input_shape(&self, n: usize) -> Shape {
        let [d, h, w] = self.config.input_dims();
        Shape::new(n, 1, d, h, w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(checkpoint::save(path, &self.config.to_echo(), &self.store)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let archive = checkpoint::load::<T>(path)?;
        let config = ClassifierConfig::from_echo(&archive.config)?;
        let mut model = ClfModel::new(config, 0)?;
        model.store.load_named(archive.tensors)?;
        Ok(model)
    }
}
