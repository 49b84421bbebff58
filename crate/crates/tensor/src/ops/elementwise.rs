use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

impl<T: Scalar> Graph<T> {
    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch(format!("add: {} vs {}", a.shape(), b.shape())));
        }
        let mut y = a.value().clone();
        y.add_assign(b.value());
        Ok(self.record(y, &[a, b], |dy, need| {
            vec![need[0].then(|| dy.clone()), need[1].then(|| dy.clone())]
        }))
    }

    /// Concatenate along the channel axis.
    pub fn concat(&self, xs: &[&Var<T>]) -> Result<Var<T>> {
        let first = xs
            .first()
            .ok_or_else(|| Error::ShapeMismatch("concat of nothing".into()))?
            .shape();
        let mut channels = Vec::with_capacity(xs.len());
        for v in xs {
            let s = v.shape();
            if s.with_c(first.c) != first {
                return Err(Error::ShapeMismatch(format!("concat: {s} vs {first}")));
            }
            channels.push(s.c);
        }
        let total: usize = channels.iter().sum();
        let ys = first.with_c(total);
        let sp = first.spatial();
        let mut y = Tensor::zeros(ys);
        for n in 0..first.n {
            let mut off = 0;
            let dst = y.item_mut(n);
            for v in xs {
                let src = v.value().item(n);
                dst[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.record(y, xs, move |dy, need| {
            let mut out = Vec::with_capacity(channels.len());
            let mut c0 = 0;
            for (i, &c) in channels.iter().enumerate() {
                if need[i] {
                    let mut g = Tensor::zeros(first.with_c(c));
                    for n in 0..first.n {
                        let src = &dy.item(n)[c0 * sp..(c0 + c) * sp];
                        g.item_mut(n).copy_from_slice(src);
                    }
                    out.push(Some(g));
                } else {
                    out.push(None);
                }
                c0 += c;
            }
            out
        }))
    }

    /// `y[n, c, ..] = x[n, c, ..] * s[n, c]`.
    pub fn channel_scale(&self, x: &Var<T>, s: &Var<T>) -> Result<Var<T>> {
        let xs = x.shape();
        if s.shape() != Shape::vector(xs.n, xs.c) {
            return Err(Error::ShapeMismatch(format!("channel_scale: {} by {}", xs, s.shape())));
        }
        let sp = xs.spatial();
        let mut y = x.value().clone();
        for (ch, &g) in y.data_mut().chunks_mut(sp).zip(s.value().data()) {
            ch.iter_mut().for_each(|v| *v *= g);
        }
        let (xa, sa) = (x.shared(), s.shared());
        Ok(self.record(y, &[x, s], move |dy, need| {
            let dx = need[0].then(|| {
                let mut dx = dy.clone();
                for (ch, &g) in dx.data_mut().chunks_mut(sp).zip(sa.data()) {
                    ch.iter_mut().for_each(|v| *v *= g);
                }
                dx
            });
            let ds = need[1].then(|| {
                let data = dy
                    .data()
                    .chunks(sp)
                    .zip(xa.data().chunks(sp))
                    .map(|(g, x)| g.iter().zip(x).map(|(&g, &x)| g * x).sum::<T>())
                    .collect();
                Tensor::from_vec(Shape::vector(xs.n, xs.c), data).expect("gate length")
            });
            vec![dx, ds]
        }))
    }

    pub fn sigmoid(&self, x: &Var<T>) -> Var<T> {
        let y = x.value().map(|v| T::one() / (T::one() + (-v).exp()));
        let ya = std::sync::Arc::new(y.clone());
        self.record(y, &[x], move |dy, _| {
            let mut dx = dy.clone();
            for (g, &s) in dx.data_mut().iter_mut().zip(ya.data()) {
                *g *= s * (T::one() - s);
            }
            vec![Some(dx)]
        })
    }

    /// Per-channel parametric ReLU; `alpha` has shape `[1, c]`.
    pub fn prelu(&self, x: &Var<T>, alpha: &Var<T>) -> Result<Var<T>> {
        let xs = x.shape();
        if alpha.shape() != Shape::vector(1, xs.c) {
            return Err(Error::ShapeMismatch(format!("prelu alpha {} for {xs}", alpha.shape())));
        }
        let sp = xs.spatial();
        let a = alpha.value().data().to_vec();
        let mut y = x.value().clone();
        for (i, ch) in y.data_mut().chunks_mut(sp).enumerate() {
            let ac = a[i % xs.c];
            ch.iter_mut().for_each(|v| {
                if *v < T::zero() {
                    *v *= ac
                }
            });
        }
        let xa = x.shared();
        Ok(self.record(y, &[x, alpha], move |dy, need| {
            let mut dx = need[0].then(|| dy.clone());
            let mut da = need[1].then(|| Tensor::zeros(Shape::vector(1, xs.c)));
            for (i, (gch, xch)) in dy.data().chunks(sp).zip(xa.data().chunks(sp)).enumerate() {
                let c = i % xs.c;
                if let Some(dx) = dx.as_mut() {
                    let dch = &mut dx.data_mut()[i * sp..(i + 1) * sp];
                    for (d, &xv) in dch.iter_mut().zip(xch) {
                        if xv < T::zero() {
                            *d *= a[c];
                        }
                    }
                }
                if let Some(da) = da.as_mut() {
                    let s: T = gch.iter().zip(xch).filter(|(_, &xv)| xv < T::zero()).map(|(&g, &xv)| g * xv).sum();
                    da.data_mut()[c] += s;
                }
            }
            vec![dx, da]
        }))
    }

    /// Inverted dropout, active only in training mode.
    pub fn dropout(&self, x: &Var<T>, rate: f64) -> Var<T> {
        if !self.is_training() || rate <= 0.0 {
            return x.clone();
        }
        let keep = 1.0 - rate;
        let scale = T::lit(1.0 / keep);
        let mask: Vec<T> = self.with_rng(|rng| {
            (0..x.value().len()).map(|_| if rng.gen::<f64>() < keep { scale } else { T::zero() }).collect()
        });
        let mut y = x.value().clone();
        for (v, &m) in y.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.record(y, &[x], move |dy, _| {
            let mut dx = dy.clone();
            for (v, &m) in dx.data_mut().iter_mut().zip(&mask) {
                *v *= m;
            }
            vec![Some(dx)]
        })
    }

    /// Mean of all elements, as a `[1, 1]` tensor.
    pub fn mean(&self, x: &Var<T>) -> Var<T> {
        let xs = x.shape();
        let inv = T::one() / T::lit(xs.numel() as f64);
        let y = Tensor::scalar(x.value().sum() * inv);
        self.record(y, &[x], move |dy, _| vec![Some(Tensor::full(xs, dy.data()[0] * inv))])
    }

    /// Channel-wise softmax at every spatial position.
    pub fn softmax(&self, x: &Var<T>) -> Var<T> {
        let xs = x.shape();
        let sp = xs.spatial();
        let mut y = x.value().clone();
        for n in 0..xs.n {
            let item = y.item_mut(n);
            for p in 0..sp {
                let mut m = T::neg_infinity();
                for c in 0..xs.c {
                    m = m.max(item[c * sp + p]);
                }
                let mut z = T::zero();
                for c in 0..xs.c {
                    let e = (item[c * sp + p] - m).exp();
                    item[c * sp + p] = e;
                    z += e;
                }
                for c in 0..xs.c {
                    item[c * sp + p] /= z;
                }
            }
        }
        let ya = std::sync::Arc::new(y.clone());
        self.record(y, &[x], move |dy, _| {
            let mut dx = Tensor::zeros(xs);
            for n in 0..xs.n {
                let (yi, gi) = (ya.item(n), dy.item(n));
                let di = dx.item_mut(n);
                for p in 0..sp {
                    let dot: T = (0..xs.c).map(|c| yi[c * sp + p] * gi[c * sp + p]).sum();
                    for c in 0..xs.c {
                        di[c * sp + p] = yi[c * sp + p] * (gi[c * sp + p] - dot);
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    /// Keep one channel: `[n, c, ..] -> [n, 1, ..]`.
    pub fn select_channel(&self, x: &Var<T>, channel: usize) -> Result<Var<T>> {
        let xs = x.shape();
        if channel >= xs.c {
            return Err(Error::ShapeMismatch(format!("channel {channel} of {xs}")));
        }
        let sp = xs.spatial();
        let mut y = Tensor::zeros(xs.with_c(1));
        for n in 0..xs.n {
            y.item_mut(n).copy_from_slice(&x.value().item(n)[channel * sp..(channel + 1) * sp]);
        }
        Ok(self.record(y, &[x], move |dy, _| {
            let mut dx = Tensor::zeros(xs);
            for n in 0..xs.n {
                dx.item_mut(n)[channel * sp..(channel + 1) * sp].copy_from_slice(dy.item(n));
            }
            vec![Some(dx)]
        }))
    }
}
