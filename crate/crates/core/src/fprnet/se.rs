use nodet_tensor::nn::{Linear, PRelu};
use nodet_tensor::{Graph, ParamStore, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Result};
use crate::Scalar;

/// Squeeze (global average) -> affine c->s -> PReLU -> affine s->c ->
/// sigmoid -> per-channel scale.
#[derive(Clone, Debug)]
pub struct SeGate {
    down: Linear,
    act: PRelu,
    up: Linear,
    pub channels: usize,
    pub squeeze: usize,
}

impl SeGate {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, squeeze: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        ensure(squeeze >= 1 && squeeze < channels, || format!("squeeze width {squeeze} must be in [1, {channels})"))?;
        Ok(SeGate {
            down: Linear::new(store, &format!("{name}.down"), channels, squeeze, rng),
            act: PRelu::new(store, &format!("{name}.act"), squeeze),
            up: Linear::new(store, &format!("{name}.up"), squeeze, channels, rng),
            channels,
            squeeze,
        })
    }

    /// The `[n, c, 1, 1, 1]` gate in (0,1).
    pub fn gate<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let s = g.global_avg_pool(x);
        let s = self.down.forward(g, store, &s)?;
        let s = self.act.forward(g, store, &s)?;
        let s = self.up.forward(g, store, &s)?;
        Ok(g.sigmoid(&s))
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let gate = self.gate(g, store, x)?;
        Ok(g.channel_scale(x, &gate)?)
    }
}
