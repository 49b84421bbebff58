//! First-order optimizers over a [`ParamStore`].

use crate::graph::{BufferUpdate, Gradients};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub trait Optimizer<T: Scalar> {
    fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>);
    fn learning_rate(&self) -> f64;
    fn set_learning_rate(&mut self, lr: f64);
}

/// Write refreshed running statistics back into the store.
pub fn apply_buffer_updates<T: Scalar>(store: &mut ParamStore<T>, updates: Vec<BufferUpdate<T>>) {
    for u in updates {
        store.set(u.id, u.value).expect("buffer shape is fixed by its layer");
    }
}

fn slot<'a, T: Scalar>(state: &'a mut Vec<Option<Tensor<T>>>, i: usize, like: &Tensor<T>) -> &'a mut Tensor<T> {
    if state.len() <= i {
        state.resize_with(i + 1, || None);
    }
    state[i].get_or_insert_with(|| Tensor::zeros(like.shape()))
}

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-7, t: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl<T: Scalar> Optimizer<T> for Adam<T> {
    fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = T::lit(self.lr * c2.sqrt() / c1);
        let eps = T::lit(self.eps);
        for (id, g) in grads.iter() {
            if !store.is_trainable(id) {
                continue;
            }
            let i = id.index();
            let m = slot(&mut self.m, i, g);
            for (m, &gv) in m.data_mut().iter_mut().zip(g.data()) {
                *m = b1 * *m + (T::one() - b1) * gv;
            }
            let v = slot(&mut self.v, i, g);
            for (v, &gv) in v.data_mut().iter_mut().zip(g.data()) {
                *v = b2 * *v + (T::one() - b2) * gv * gv;
            }
            let (m, v) = (self.m[i].as_ref().unwrap(), self.v[i].as_ref().unwrap());
            let w = store.get_mut(id);
            for ((w, &m), &v) in w.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                *w -= step * m / (v.sqrt() + eps);
            }
        }
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }
}

/// Stochastic gradient descent with classical momentum:
/// `v <- mu v - lr g; w <- w + v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    lr: f64,
    momentum: f64,
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd { lr, momentum, velocity: Vec::new() }
    }
}

impl<T: Scalar> Optimizer<T> for Sgd<T> {
    fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        let (mu, lr) = (T::lit(self.momentum), T::lit(self.lr));
        for (id, g) in grads.iter() {
            if !store.is_trainable(id) {
                continue;
            }
            let v = slot(&mut self.velocity, id.index(), g);
            for (v, &gv) in v.data_mut().iter_mut().zip(g.data()) {
                *v = mu * *v - lr * gv;
            }
            let v = self.velocity[id.index()].as_ref().unwrap();
            store.get_mut(id).add_assign(v);
        }
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::Shape;

    fn quadratic_steps(opt: &mut dyn Optimizer<f64>, steps: usize) -> f64 {
        // minimise sum (w - 3)^2 via the tape
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::full(Shape::vector(1, 2), 0.0));
        for _ in 0..steps {
            let g = Graph::training(0);
            let w = g.param(&store, id);
            let shift = g.constant(Tensor::full(Shape::vector(1, 2), -3.0));
            let d = g.add(&w, &shift).unwrap();
            let sq = g.channel_scale(&d, &d).unwrap();
            let loss = g.mean(&sq);
            let grads = g.backward(&loss);
            opt.step(&mut store, &grads);
        }
        store.get(id).data()[0]
    }

    #[test]
    fn sgd_momentum_converges() {
        let w = quadratic_steps(&mut Sgd::new(0.1, 0.9), 200);
        assert!((w - 3.0).abs() < 1e-3, "{w}");
    }

    #[test]
    fn adam_converges() {
        let w = quadratic_steps(&mut Adam::new(0.05), 600);
        assert!((w - 3.0).abs() < 1e-2, "{w}");
    }
}
