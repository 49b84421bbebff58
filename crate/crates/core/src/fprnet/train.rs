use std::io::Write;
use std::path::Path;

use nodet_tensor::ops::loss::cross_entropy_value;
use nodet_tensor::optim::{apply_buffer_updates, Optimizer, Sgd};
use nodet_tensor::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::augment::ClfPatch;
use super::model::ClfModel;
use crate::error::{ensure, Error, Result};
use crate::Scalar;

/// Mean binary cross-entropy with probabilities clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn cross_entropy_loss(labels: &[f64], probs: &[f64]) -> Result<f64> {
    Ok(cross_entropy_value(labels, probs)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClfTrainSpec {
    pub lr: f64,
    pub decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClfTrainSpec {
    fn default() -> Self {
        ClfTrainSpec { lr: 1e-3, decay: 0.9, momentum: 0.9, epochs: 20, batch_size: 64, seed: 0 }
    }
}

impl ClfTrainSpec {
    pub fn validate(&self) -> Result<()> {
        ensure(self.lr > 0.0 && self.lr.is_finite(), || format!("learning rate {} must be positive", self.lr))?;
        ensure(self.decay > 0.0 && self.decay < 1.0, || format!("decay {} must be in (0,1)", self.decay))?;
        ensure((0.0..1.0).contains(&self.momentum), || format!("momentum {} must be in [0,1)", self.momentum))?;
        ensure(self.epochs > 0 && self.batch_size > 0, || "epochs and batch size must be positive".into())
    }

    /// Learning rate for 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay.powi(epoch as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClfEpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClfHistory {
    pub records: Vec<ClfEpochRecord>,
}

pub const CLF_HISTORY_HEADER: &str = "epoch,lr,train_loss,train_accuracy";

impl ClfHistory {
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("classifier history", e);
        writeln!(w, "{CLF_HISTORY_HEADER}").map_err(io)?;
        for r in &self.records {
            writeln!(w, "{},{},{},{}", r.epoch, r.lr, r.loss, r.accuracy).map_err(io)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(std::io::BufWriter::new(f))
    }
}

fn stack<T: Scalar>(patches: &[ClfPatch<T>], idx: &[usize]) -> Result<(Tensor<T>, Vec<T>)> {
    let parts: Vec<Tensor<T>> = idx.iter().map(|&i| patches[i].data.clone()).collect();
    let labels = idx.iter().map(|&i| if patches[i].positive { T::one() } else { T::zero() }).collect();
    Ok((Tensor::stack(&parts)?, labels))
}

/// One SGD step; returns the batch loss and the number of correct
/// predictions (p >= 0.5 counts as nodule).
pub fn clf_train_step<T: Scalar>(
    model: &mut ClfModel<T>,
    opt: &mut dyn Optimizer<T>,
    input: Tensor<T>,
    labels: &[T],
    seed: u64,
) -> Result<(f64, usize)> {
    let g = Graph::training(seed);
    let x = g.constant(input);
    let probs = model.forward(&g, &x)?;
    let p = g.select_channel(&probs, 1)?;
    let loss = g.binary_cross_entropy(&p, labels)?;
    let value = loss.value().data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("classifier loss {value} at step seed {seed}")));
    }
    let correct = p.value().data().iter().zip(labels).filter(|(&q, &y)| (q.as_f64() >= 0.5) == (y.as_f64() > 0.5)).count();
    let updates = g.take_buffer_updates();
    let grads = g.backward(&loss);
    if !grads.all_finite() {
        return Err(Error::NonFinite(format!("classifier gradient at step seed {seed}")));
    }
    opt.step(&mut model.store, &grads);
    apply_buffer_updates(&mut model.store, updates);
    Ok((value, correct))
}

/// SGD with momentum and per-epoch exponential decay; one history row per
/// epoch with the running training loss and accuracy.
pub fn train_classifier<T: Scalar>(model: &mut ClfModel<T>, patches: &[ClfPatch<T>], spec: &ClfTrainSpec) -> Result<ClfHistory> {
    spec.validate()?;
    let pos = patches.iter().filter(|p| p.positive).count();
    ensure(pos > 0 && pos < patches.len(), || format!("classifier training needs both classes ({pos} positives of {})", patches.len()))?;
    let want = model.input_shape(1);
    ensure(patches.iter().all(|p| p.data.shape() == want), || format!("classifier patches must be {want}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xc1f_5eed);
    let mut order: Vec<usize> = (0..patches.len()).collect();
    let mut opt = Sgd::new(spec.lr, spec.momentum);
    let mut history = ClfHistory::default();
    let mut step = 0u64;
    for epoch in 0..spec.epochs {
        let lr = spec.lr_at(epoch);
        opt.set_learning_rate(lr);
        order.shuffle(&mut rng);
        let (mut sum, mut correct) = (0.0, 0);
        for chunk in order.chunks(spec.batch_size) {
            let (x, y) = stack(patches, chunk)?;
            let (loss, ok) = clf_train_step(model, &mut opt, x, &y, spec.seed.wrapping_add(step))?;
            sum += loss * chunk.len() as f64;
            correct += ok;
            step += 1;
        }
        let n = patches.len() as f64;
        let rec = ClfEpochRecord { epoch, lr, loss: sum / n, accuracy: correct as f64 / n };
        log::info!("clf {} epoch {epoch}: lr {lr:.6} loss {:.5} acc {:.4}", model.config.variant, rec.loss, rec.accuracy);
        history.records.push(rec);
    }
    Ok(history)
}

/// Fraction of `patches` classified correctly at threshold 0.5.
pub fn accuracy<T: Scalar>(model: &ClfModel<T>, patches: &[ClfPatch<T>], batch: usize) -> Result<f64> {
    ensure(!patches.is_empty(), || "no patches".into())?;
    let idx: Vec<usize> = (0..patches.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = stack(patches, chunk)?;
        let p = model.predict(&x)?;
        correct += p.iter().zip(&y).filter(|(&q, &l)| (q.as_f64() >= 0.5) == (l.as_f64() > 0.5)).count();
    }
    Ok(correct as f64 / patches.len() as f64)
}

/// Convex weights for the three-classifier average.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnsembleWeights(pub [f64; 3]);

impl Default for EnsembleWeights {
    fn default() -> Self {
        EnsembleWeights([1.0 / 3.0; 3])
    }
}

impl EnsembleWeights {
    pub fn new(w: [f64; 3]) -> Result<Self> {
        ensure(w.iter().all(|&v| v >= 0.0 && v.is_finite()), || format!("ensemble weights {w:?} must be non-negative"))?;
        let sum: f64 = w.iter().sum();
        ensure((sum - 1.0).abs() <= 1e-9, || format!("ensemble weights {w:?} sum to {sum}, not 1"))?;
        Ok(EnsembleWeights(w))
    }
}

pub fn ensemble_predict(p: [f64; 3], weights: &EnsembleWeights) -> Result<f64> {
    let w = EnsembleWeights::new(weights.0)?;
    ensure(p.iter().all(|v| (0.0..=1.0).contains(v)), || format!("probabilities {p:?} outside [0,1]"))?;
    Ok(p.iter().zip(w.0).map(|(a, b)| a * b).sum())
}
