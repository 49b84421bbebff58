use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probabilities are clamped into `[CLAMP, 1 - CLAMP]` before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// `-(1/N) sum [y log p + (1 - y) log(1 - p)]` with clamped `p`.
pub fn cross_entropy_value<T: Scalar>(labels: &[T], probs: &[T]) -> Result<T> {
    if labels.len() != probs.len() || labels.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels vs {} probabilities",
            labels.len(),
            probs.len()
        )));
    }
    let (lo, hi) = (T::lit(PROB_CLAMP), T::lit(1.0 - PROB_CLAMP));
    let total: T = labels
        .iter()
        .zip(probs)
        .map(|(&y, &p)| {
            let p = p.max(lo).min(hi);
            y * p.ln() + (T::one() - y) * (T::one() - p).ln()
        })
        .sum();
    Ok(-total / T::lit(labels.len() as f64))
}

/// Smoothed Dice loss `1 - (2 sum(g s) + eta) / (sum g + sum s + eta)`.
pub fn dice_value<T: Scalar>(gt: &[T], seg: &[T], eta: T) -> Result<T> {
    if gt.len() != seg.len() {
        return Err(Error::ShapeMismatch(format!("dice: {} vs {}", gt.len(), seg.len())));
    }
    let (mut inter, mut sg, mut ss) = (T::zero(), T::zero(), T::zero());
    for (&g, &s) in gt.iter().zip(seg) {
        inter += g * s;
        sg += g;
        ss += s;
    }
    Ok(T::one() - (T::lit(2.0) * inter + eta) / (sg + ss + eta))
}

impl<T: Scalar> Graph<T> {
    /// Binary cross-entropy of predicted probabilities `p` (any shape with one
    /// element per sample) against 0/1 `labels`.
    pub fn binary_cross_entropy(&self, p: &Var<T>, labels: &[T]) -> Result<Var<T>> {
        let probs = p.value().data();
        let value = cross_entropy_value(labels, probs)?;
        let shape = p.shape();
        let n = T::lit(labels.len() as f64);
        let (lo, hi) = (T::lit(PROB_CLAMP), T::lit(1.0 - PROB_CLAMP));
        let labels = labels.to_vec();
        let pa = p.shared();
        Ok(self.record(Tensor::scalar(value), &[p], move |dy, _| {
            let g0 = dy.data()[0];
            let data = labels
                .iter()
                .zip(pa.data())
                .map(|(&y, &p)| {
                    if p < lo || p > hi {
                        T::zero()
                    } else {
                        -g0 * (y / p - (T::one() - y) / (T::one() - p)) / n
                    }
                })
                .collect();
            vec![Some(Tensor::from_vec(shape, data).expect("label length"))]
        }))
    }

    /// Mean over the batch of the per-item smoothed Dice loss. `gt` has the
    /// same shape as `seg`.
    pub fn dice_loss(&self, seg: &Var<T>, gt: &Tensor<T>, eta: T) -> Result<Var<T>> {
        let shape = seg.shape();
        if gt.shape() != shape {
            return Err(Error::ShapeMismatch(format!("dice: seg {shape} vs gt {}", gt.shape())));
        }
        let mut terms = Vec::with_capacity(shape.n);
        let mut total = T::zero();
        for n in 0..shape.n {
            let (g, s) = (gt.item(n), seg.value().item(n));
            let inter: T = g.iter().zip(s).map(|(&a, &b)| a * b).sum();
            let denom = g.iter().copied().sum::<T>() + s.iter().copied().sum::<T>() + eta;
            let numer = T::lit(2.0) * inter + eta;
            total += T::one() - numer / denom;
            terms.push((numer, denom));
        }
        let inv_n = T::one() / T::lit(shape.n as f64);
        let gt = gt.clone();
        Ok(self.record(Tensor::scalar(total * inv_n), &[seg], move |dy, _| {
            let g0 = dy.data()[0] * inv_n;
            let mut ds = Tensor::zeros(shape);
            for (n, &(numer, denom)) in terms.iter().enumerate() {
                let d2 = denom * denom;
                let gi = gt.item(n);
                for (d, &g) in ds.item_mut(n).iter_mut().zip(gi) {
                    *d = -g0 * (T::lit(2.0) * g * denom - numer) / d2;
                }
            }
            vec![Some(ds)]
        }))
    }
}
