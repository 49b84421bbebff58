use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamId;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Running statistics of a batch-normalization layer.
pub struct RunningStats<'a, T> {
    pub mean: &'a Tensor<T>,
    pub var: &'a Tensor<T>,
    pub mean_id: ParamId,
    pub var_id: ParamId,
    /// Weight of the current batch in the running average.
    pub momentum: f64,
}

impl<T: Scalar> Graph<T> {
    /// Batch normalization over `(n, d, h, w)` per channel. Training mode
    /// normalizes with batch statistics and schedules a running-statistics
    /// update; inference mode uses the running statistics.
    pub fn batch_norm(
        &self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        stats: RunningStats<'_, T>,
        eps: f64,
    ) -> Result<Var<T>> {
        let xs = x.shape();
        let cs = Shape::vector(1, xs.c);
        if gamma.shape() != cs || beta.shape() != cs || stats.mean.shape() != cs || stats.var.shape() != cs {
            return Err(Error::ShapeMismatch(format!("batch_norm parameters for {xs}")));
        }
        let sp = xs.spatial();
        let m = xs.n * sp;
        let eps = T::lit(eps);
        let (mean, var) = if self.is_training() {
            let mut mean = vec![T::zero(); xs.c];
            let mut var = vec![T::zero(); xs.c];
            for (i, ch) in x.value().data().chunks(sp).enumerate() {
                mean[i % xs.c] += ch.iter().copied().sum::<T>();
            }
            let inv_m = T::one() / T::lit(m as f64);
            mean.iter_mut().for_each(|v| *v *= inv_m);
            for (i, ch) in x.value().data().chunks(sp).enumerate() {
                let mu = mean[i % xs.c];
                var[i % xs.c] += ch.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
            }
            var.iter_mut().for_each(|v| *v *= inv_m);

            let mom = T::lit(stats.momentum);
            let unbias = if m > 1 { T::lit(m as f64 / (m as f64 - 1.0)) } else { T::one() };
            let rm = Tensor::from_fn(cs, |c| (T::one() - mom) * stats.mean.data()[c] + mom * mean[c]);
            let rv = Tensor::from_fn(cs, |c| (T::one() - mom) * stats.var.data()[c] + mom * var[c] * unbias);
            self.push_buffer_update(stats.mean_id, rm);
            self.push_buffer_update(stats.var_id, rv);
            (mean, var)
        } else {
            (stats.mean.data().to_vec(), stats.var.data().to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = x.value().clone();
        for (i, ch) in xhat.data_mut().chunks_mut(sp).enumerate() {
            let c = i % xs.c;
            ch.iter_mut().for_each(|v| *v = (*v - mean[c]) * inv_std[c]);
        }
        let g = gamma.value().data().to_vec();
        let b = beta.value().data().to_vec();
        let mut y = xhat.clone();
        for (i, ch) in y.data_mut().chunks_mut(sp).enumerate() {
            let c = i % xs.c;
            ch.iter_mut().for_each(|v| *v = *v * g[c] + b[c]);
        }
        let training = self.is_training();
        Ok(self.record(y, &[x, gamma, beta], move |dy, need| {
            let mut sum_dy = vec![T::zero(); xs.c];
            let mut sum_dy_xhat = vec![T::zero(); xs.c];
            for (i, (gch, hch)) in dy.data().chunks(sp).zip(xhat.data().chunks(sp)).enumerate() {
                let c = i % xs.c;
                for (&gv, &hv) in gch.iter().zip(hch) {
                    sum_dy[c] += gv;
                    sum_dy_xhat[c] += gv * hv;
                }
            }
            let dx = need[0].then(|| {
                let mut dx = dy.clone();
                let inv_m = T::one() / T::lit(m as f64);
                for (i, (dch, hch)) in dx.data_mut().chunks_mut(sp).zip(xhat.data().chunks(sp)).enumerate() {
                    let c = i % xs.c;
                    let k = g[c] * inv_std[c];
                    if training {
                        let (s1, s2) = (sum_dy[c] * inv_m, sum_dy_xhat[c] * inv_m);
                        for (d, &h) in dch.iter_mut().zip(hch) {
                            *d = k * (*d - s1 - h * s2);
                        }
                    } else {
                        dch.iter_mut().for_each(|d| *d *= k);
                    }
                }
                dx
            });
            let dgamma = need[1].then(|| Tensor::from_vec(cs, sum_dy_xhat.clone()).expect("channels"));
            let dbeta = need[2].then(|| Tensor::from_vec(cs, sum_dy.clone()).expect("channels"));
            vec![dx, dgamma, dbeta]
        }))
    }
}
