//! Parameterised layers. Each layer owns only [`ParamId`]s; tensors live in a
//! [`ParamStore`], so one store can be checkpointed or optimised as a whole.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::ops::conv::ConvGeom;
use crate::ops::norm::RunningStats;
use crate::params::{he_normal, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const PRELU_INIT: f64 = 0.25;

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: [usize; 3],
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_channels * kernel.iter().product::<usize>();
        let weight = store.add(
            format!("{name}.weight"),
            he_normal(Shape::new(out_channels, in_channels, kernel[0], kernel[1], kernel[2]), fan_in, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(Shape::vector(1, out_channels))));
        Conv { weight, bias, kernel, in_channels, out_channels }
    }

    /// Multiply the initial weights by `factor`, e.g. `sqrt(0.5)` turns the
    /// He initialisation into a variance-preserving one for layers that are
    /// not followed by a rectifier.
    pub fn rescale<T: Scalar>(&self, store: &mut ParamStore<T>, factor: f64) {
        store.get_mut(self.weight).scale(T::lit(factor));
    }

    /// Stride-1 convolution preserving the spatial grid.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let geom = ConvGeom::same(x.shape().dims(), self.kernel);
        self.forward_geom(g, store, x, geom)
    }

    pub fn forward_geom<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        x: &Var<T>,
        geom: ConvGeom,
    ) -> Result<Var<T>> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv(x, &w, b.as_ref(), geom)
    }
}

/// Transposed convolution; weight layout `[c_in, c_out, kd, kh, kw]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
}

impl ConvTranspose {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let taps = kernel.iter().product::<usize>();
        let per_output = (taps / stride.iter().product::<usize>()).max(1);
        let weight = store.add(
            format!("{name}.weight"),
            he_normal(
                Shape::new(in_channels, out_channels, kernel[0], kernel[1], kernel[2]),
                in_channels * per_output,
                rng,
            ),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(Shape::vector(1, out_channels))));
        ConvTranspose { weight, bias, kernel, stride }
    }

    /// Upsample by `stride` with "same" padding: output grid = input grid x stride.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let small = x.shape().dims();
        let large = [small[0] * self.stride[0], small[1] * self.stride[1], small[2] * self.stride[2]];
        let geom = ConvGeom::strided_same(large, self.kernel, self.stride);
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv_transpose(x, &w, b.as_ref(), geom)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let s = Shape::vector(1, channels);
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(s, T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(s)),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(s)),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(s, T::one())),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let stats = RunningStats {
            mean: store.get(self.running_mean),
            var: store.get(self.running_var),
            mean_id: self.running_mean,
            var_id: self.running_var,
            momentum: BN_MOMENTUM,
        };
        g.batch_norm(x, &gamma, &beta, stats, BN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct PRelu {
    pub alpha: ParamId,
}

impl PRelu {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        PRelu { alpha: store.add(format!("{name}.alpha"), Tensor::full(Shape::vector(1, channels), T::lit(PRELU_INIT))) }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let a = g.param(store, self.alpha);
        g.prelu(x, &a)
    }
}

/// Affine map on `[n, c, 1, 1, 1]` vectors.
#[derive(Clone, Debug)]
pub struct Linear {
    conv: Conv,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Linear { conv: Conv::new(store, name, in_features, out_features, [1, 1, 1], true, rng) }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        self.conv.forward(g, store, x)
    }
}

/// Convolution -> batch normalization -> PReLU.
#[derive(Clone, Debug)]
pub struct ConvBnAct {
    pub conv: Conv,
    pub bn: BatchNorm,
    pub act: PRelu,
}

impl ConvBnAct {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        ConvBnAct {
            conv: Conv::new(store, &format!("{name}.conv"), in_channels, out_channels, kernel, false, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), out_channels),
            act: PRelu::new(store, &format!("{name}.act"), out_channels),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.conv.forward(g, store, x)?;
        let y = self.bn.forward(g, store, &y)?;
        self.act.forward(g, store, &y)
    }
}

/// Batch normalization -> PReLU -> convolution (pre-activation ordering).
#[derive(Clone, Debug)]
pub struct BnActConv {
    pub bn: BatchNorm,
    pub act: PRelu,
    pub conv: Conv,
}

impl BnActConv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        BnActConv {
            bn: BatchNorm::new(store, &format!("{name}.bn"), in_channels),
            act: PRelu::new(store, &format!("{name}.act"), in_channels),
            conv: Conv::new(store, &format!("{name}.conv"), in_channels, out_channels, kernel, true, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.bn.forward(g, store, x)?;
        let y = self.act.forward(g, store, &y)?;
        self.conv.forward(g, store, &y)
    }
}
