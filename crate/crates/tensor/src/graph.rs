//! Reverse-mode tape.
//!
//! A [`Graph`] records every differentiable op applied to [`Var`]s. Calling
//! [`Graph::backward`] replays the tape in reverse and returns the gradient of
//! a scalar loss with respect to each parameter that took part in the forward
//! pass. With gradients disabled nothing is recorded and intermediate values
//! are freed as soon as their `Var` is dropped.

use std::cell::RefCell;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

type BackwardFn<T> = Box<dyn FnOnce(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
    param: Option<ParamId>,
}

/// A value flowing through the graph. Cheap to clone.
#[derive(Clone)]
pub struct Var<T> {
    value: Arc<Tensor<T>>,
    node: Option<usize>,
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shared(&self) -> Arc<Tensor<T>> {
        Arc::clone(&self.value)
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn into_tensor(self) -> Tensor<T> {
        Arc::try_unwrap(self.value).unwrap_or_else(|a| (*a).clone())
    }
}

/// Running-statistic refresh produced by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BufferUpdate<T> {
    pub id: ParamId,
    pub value: Tensor<T>,
}

pub struct Graph<T: Scalar> {
    grad_enabled: bool,
    training: bool,
    nodes: RefCell<Vec<Node<T>>>,
    buffer_updates: RefCell<Vec<BufferUpdate<T>>>,
    rng: RefCell<ChaCha8Rng>,
}

impl<T: Scalar> Graph<T> {
    /// Training mode: records the tape, batch statistics in normalization,
    /// dropout active (seeded).
    pub fn training(seed: u64) -> Self {
        Self::with_mode(true, true, seed)
    }

    /// Inference mode: no tape, running statistics, dropout off.
    pub fn inference() -> Self {
        Self::with_mode(false, false, 0)
    }

    pub fn with_mode(grad_enabled: bool, training: bool, seed: u64) -> Self {
        Graph {
            grad_enabled,
            training,
            nodes: RefCell::new(Vec::new()),
            buffer_updates: RefCell::new(Vec::new()),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn with_rng<R>(&self, f: impl FnOnce(&mut ChaCha8Rng) -> R) -> R {
        f(&mut self.rng.borrow_mut())
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var { value: Arc::new(value), node: None }
    }

    /// Input that receives a gradient, reported under `id` by `backward`.
    pub fn leaf(&self, value: Tensor<T>, id: ParamId) -> Var<T> {
        self.leaf_shared(Arc::new(value), id)
    }

    fn leaf_shared(&self, value: Arc<Tensor<T>>, id: ParamId) -> Var<T> {
        if !self.grad_enabled {
            return Var { value, node: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { parents: Vec::new(), backward: None, param: Some(id) });
        Var { value, node: Some(nodes.len() - 1) }
    }

    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<T> {
        let value = store.shared(id);
        if store.is_trainable(id) {
            self.leaf_shared(value, id)
        } else {
            Var { value, node: None }
        }
    }

    /// Register an op output. `backward` receives the output gradient and a
    /// per-input "needs gradient" mask and returns one entry per input.
    pub fn record<F>(&self, value: Tensor<T>, inputs: &[&Var<T>], backward: F) -> Var<T>
    where
        F: FnOnce(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let value = Arc::new(value);
        if !self.grad_enabled || inputs.iter().all(|v| v.node.is_none()) {
            return Var { value, node: None };
        }
        let parents = inputs.iter().map(|v| v.node).collect();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { parents, backward: Some(Box::new(backward)), param: None });
        Var { value, node: Some(nodes.len() - 1) }
    }

    pub fn push_buffer_update(&self, id: ParamId, value: Tensor<T>) {
        if self.training {
            self.buffer_updates.borrow_mut().push(BufferUpdate { id, value });
        }
    }

    pub fn take_buffer_updates(&self) -> Vec<BufferUpdate<T>> {
        std::mem::take(&mut self.buffer_updates.borrow_mut())
    }

    /// Back-propagate from `loss` (seeded with ones) and collect leaf gradients.
    pub fn backward(self, loss: &Var<T>) -> Gradients<T> {
        let mut grads = Gradients::default();
        let Some(root) = loss.node else {
            return grads;
        };
        let mut nodes = self.nodes.into_inner();
        let mut pending: Vec<Option<Tensor<T>>> = Vec::with_capacity(nodes.len());
        pending.resize_with(nodes.len(), || None);
        pending[root] = Some(Tensor::full(loss.shape(), T::one()));

        for i in (0..=root).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &mut nodes[i];
            if let Some(id) = node.param {
                grads.accumulate(id, g);
                continue;
            }
            let Some(bw) = node.backward.take() else { continue };
            let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let parent_grads = bw(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                if let (Some(p), Some(pg)) = (parent, pg) {
                    match &mut pending[*p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }
        grads
    }
}

/// Gradients keyed by [`ParamId`].
#[derive(Default)]
pub struct Gradients<T> {
    by_id: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    fn accumulate(&mut self, id: ParamId, g: Tensor<T>) {
        let i = id.index();
        if self.by_id.len() <= i {
            self.by_id.resize_with(i + 1, || None);
        }
        match &mut self.by_id[i] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_id.get(id.index()).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.by_id
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId::from_index(i), g)))
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|(_, g)| g.all_finite())
    }
}
