use std::io::Write;
use std::path::Path;

use nodet_tensor::ops::loss::dice_value;
use nodet_tensor::optim::{apply_buffer_updates, Adam, Optimizer};
use nodet_tensor::{Graph, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::SegModel;
use super::patch::TrainingPatch;
use crate::error::{ensure, Error, Result};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DicePenaltyConfig {
    pub eta: f64,
}

impl Default for DicePenaltyConfig {
    fn default() -> Self {
        DicePenaltyConfig { eta: 1.0 }
    }
}

impl DicePenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.eta > 0.0 && self.eta.is_finite(), || format!("eta {} must be positive", self.eta))
    }
}

/// Smoothed Dice loss of one probability map against a binary map.
pub fn dice_loss<T: Scalar>(gt: &Tensor<T>, seg: &Tensor<T>, eta: f64) -> Result<T> {
    ensure(gt.shape() == seg.shape(), || format!("dice: gt {} vs seg {}", gt.shape(), seg.shape()))?;
    DicePenaltyConfig { eta }.validate()?;
    Ok(dice_value(gt.data(), seg.data(), T::lit(eta))?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegTrainSpec {
    pub lr: f64,
    pub finetune_lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub dice: DicePenaltyConfig,
    pub seed: u64,
}

impl Default for SegTrainSpec {
    fn default() -> Self {
        SegTrainSpec {
            lr: 1e-4,
            finetune_lr: 1e-5,
            batch_size: 64,
            max_epochs: 15,
            patience: 5,
            val_fraction: 0.1,
            dice: DicePenaltyConfig::default(),
            seed: 0,
        }
    }
}

impl SegTrainSpec {
    pub fn validate(&self) -> Result<()> {
        ensure(self.lr > 0.0 && self.finetune_lr > 0.0, || "learning rates must be positive".into())?;
        ensure(self.batch_size > 0 && self.max_epochs > 0, || "batch size and epochs must be positive".into())?;
        ensure(self.patience < self.max_epochs, || {
            format!("patience {} must be below max epochs {}", self.patience, self.max_epochs)
        })?;
        ensure(self.val_fraction > 0.0 && self.val_fraction < 1.0, || "validation fraction must be in (0,1)".into())?;
        self.dice.validate()
    }

    /// Same schedule at the fine-tuning learning rate.
    pub fn finetune(&self) -> Self {
        SegTrainSpec { lr: self.finetune_lr, ..self.clone() }
    }
}

/// Stop once `patience` epochs pass without a new best validation loss.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: f64::INFINITY, best_epoch: 0 }
    }

    /// Feed epoch `epoch` (1-based). Returns true when training should stop.
    pub fn update(&mut self, epoch: usize, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
        }
        epoch >= self.best_epoch + self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn improved_at(&self, epoch: usize) -> bool {
        self.best_epoch == epoch
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct History {
    pub lr: f64,
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss";

impl History {
    /// CSV with a leading `# lr = ...` comment.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("history", e);
        writeln!(w, "# lr = {}", self.lr).map_err(io)?;
        writeln!(w, "{HISTORY_HEADER}").map_err(io)?;
        for r in &self.records {
            writeln!(w, "{},{},{}", r.epoch, r.train_loss, r.val_loss).map_err(io)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(std::io::BufWriter::new(f))
    }
}

/// Seeded split into (train, validation) indices; validation gets
/// `round(n * fraction)` items, at least one, and training keeps at least one.
pub fn split_validation(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    ensure(n >= 2, || format!("need at least 2 patches for a validation split, got {n}"))?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let v = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let val = idx.split_off(n - v);
    Ok((idx, val))
}

fn stack_batch<T: Scalar>(patches: &[TrainingPatch<T>], idx: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
    let xs: Vec<_> = idx.iter().map(|&i| patches[i].input.clone()).collect();
    let ys: Vec<_> = idx.iter().map(|&i| patches[i].label.clone()).collect();
    Ok((Tensor::stack(&xs)?, Tensor::stack(&ys)?))
}

/// One optimizer step on a batch; returns the batch loss.
pub fn train_step<T: Scalar>(
    model: &mut SegModel<T>,
    opt: &mut dyn Optimizer<T>,
    input: Tensor<T>,
    label: &Tensor<T>,
    eta: f64,
    seed: u64,
) -> Result<f64> {
    let g = Graph::training(seed);
    let x = g.constant(input);
    let y = model.forward(&g, &x)?;
    let loss = g.dice_loss(&y, label, T::lit(eta))?;
    let value = loss.value().data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("segmentation loss {value} at step seed {seed}")));
    }
    let updates = g.take_buffer_updates();
    let grads = g.backward(&loss);
    if !grads.all_finite() {
        return Err(Error::NonFinite(format!("segmentation gradient at step seed {seed}")));
    }
    opt.step(&mut model.store, &grads);
    apply_buffer_updates(&mut model.store, updates);
    Ok(value)
}

/// Mean inference-mode Dice loss over `idx`.
pub fn evaluate_loss<T: Scalar>(model: &SegModel<T>, patches: &[TrainingPatch<T>], idx: &[usize], batch: usize, eta: f64) -> Result<f64> {
    let mut total = 0.0;
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = stack_batch(patches, chunk)?;
        let g = Graph::inference();
        let xv = g.constant(x);
        let p = model.forward(&g, &xv)?;
        let loss = g.dice_loss(&p, &y, T::lit(eta))?.value().data()[0].as_f64();
        total += loss * chunk.len() as f64;
    }
    let mean = total / idx.len() as f64;
    if !mean.is_finite() {
        return Err(Error::NonFinite(format!("validation loss {mean}")));
    }
    Ok(mean)
}

/// Adam on mean Dice loss with a seeded validation split and early stopping.
/// The weights of the best validation epoch are kept.
pub fn train_segmentation<T: Scalar>(model: &mut SegModel<T>, patches: &[TrainingPatch<T>], spec: &SegTrainSpec) -> Result<History> {
    spec.validate()?;
    ensure(!patches.is_empty(), || "no training patches".into())?;
    let (mut train, val) = split_validation(patches.len(), spec.val_fraction, spec.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5e9_7a11);
    let mut opt = Adam::new(spec.lr);
    let mut stopper = EarlyStopping::new(spec.patience);
    let mut best: Option<ParamStore<T>> = None;
    let mut history = History { lr: spec.lr, records: Vec::new(), best_epoch: 0, stopped_early: false };
    let mut step = 0u64;
    for epoch in 1..=spec.max_epochs {
        train.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in train.chunks(spec.batch_size) {
            let (x, y) = stack_batch(patches, chunk)?;
            sum += train_step(model, &mut opt, x, &y, spec.dice.eta, spec.seed.wrapping_add(step))? * chunk.len() as f64;
            step += 1;
        }
        let train_loss = sum / train.len() as f64;
        let val_loss = evaluate_loss(model, patches, &val, spec.batch_size, spec.dice.eta)?;
        log::info!("seg epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        history.records.push(EpochRecord { epoch, train_loss, val_loss });
        let stop = stopper.update(epoch, val_loss);
        if stopper.improved_at(epoch) {
            best = Some(model.store.clone());
        }
        if stop {
            history.stopped_early = epoch < spec.max_epochs;
            break;
        }
    }
    history.best_epoch = stopper.best_epoch();
    if let Some(store) = best {
        model.store = store;
    }
    Ok(history)
}
