//! Adam, the plateau learning-rate schedule, early stopping and the epoch
//! loop.

use std::io::Write;

use qmix_tensor::{Real, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{config_err, Error, Result};
use crate::model::Model;
use crate::params::{BufferStore, Mode, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr_patience: usize,
    pub lr_factor: f64,
    pub early_stop_patience: usize,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 8,
            max_epochs: 100,
            lr_patience: 4,
            lr_factor: 0.1,
            early_stop_patience: 15,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(config_err(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(config_err("batch_size and max_epochs must be at least 1"));
        }
        if self.lr_patience == 0 || self.early_stop_patience == 0 {
            return Err(config_err("patience values must be at least 1"));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(config_err(format!("lr_factor must lie in (0, 1), got {}", self.lr_factor)));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, p)| vec![T::zero(); p.value.numel()]).collect();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    /// Apply one update from the accumulated gradients. Every parameter must
    /// carry a gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if let Some((_, p)) = params.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(Error::Usage(format!("parameter {} has no gradient", p.name)));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of_f64(self.beta1), T::of_f64(self.beta2));
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        let step_size = T::of_f64(lr / c1);
        let inv_c2 = T::of_f64(1.0 / c2);
        let eps = T::of_f64(self.eps);
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.grad.as_ref().expect("checked above").data();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), mi), vi) in p.value.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                *w = *w - step_size * *mi / ((*vi * inv_c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` after `patience` epochs without
/// improvement, and signals a stop after `stop_patience` such epochs.
#[derive(Clone, Debug)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub stop_patience: usize,
    pub best: f64,
    /// Epochs since the last improvement, for the stop rule.
    pub since_best: usize,
    /// Epochs since the last improvement or reduction, for the lr rule.
    pub bad_epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScheduleEvent {
    pub improved: bool,
    pub reduced: bool,
    pub stop: bool,
}

impl PlateauSchedule {
    pub fn new(lr: f64, factor: f64, patience: usize, stop_patience: usize) -> Self {
        PlateauSchedule { lr, factor, patience, stop_patience, best: f64::INFINITY, since_best: 0, bad_epochs: 0 }
    }

    pub fn observe(&mut self, val_loss: f64) -> ScheduleEvent {
        let improved = val_loss < self.best;
        let mut reduced = false;
        if improved {
            self.best = val_loss;
            self.since_best = 0;
            self.bad_epochs = 0;
        } else {
            self.since_best += 1;
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
                reduced = true;
            }
        }
        ScheduleEvent { improved, reduced, stop: self.since_best >= self.stop_patience }
    }
}

/// One row of the loss history.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub vq_codebook_term: f64,
    pub vq_commitment_term: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Losses of one batch.
#[derive(Clone, Copy, Debug, Default)]
pub struct BatchLoss {
    pub total: f64,
    pub mse: f64,
    pub codebook: f64,
    pub commitment: f64,
}

/// Forward, backward and state update for one batch; gradients accumulate
/// into `model.params`.
pub fn train_batch<T: Real>(model: &mut Model<T>, x: &Tensor<T>, y: &Tensor<T>) -> Result<BatchLoss> {
    let (effects, loss) = {
        let mut g = model.graph(Mode::Train);
        let xv = g.tape.constant(x.clone());
        let yv = g.tape.constant(y.clone());
        let out = model.forward(&mut g, xv)?;
        let mse = g.tape.mse(out.prediction, yv)?;
        let mut loss = BatchLoss { mse: g.tape.value(mse).item().as_f64(), ..Default::default() };
        let total = match &out.vq {
            Some(vq) => {
                loss.codebook = g.tape.value(vq.codebook_term).item().as_f64();
                loss.commitment = g.tape.value(vq.commitment_term).item().as_f64();
                let weighted = g.tape.scale(vq.loss, T::of_f64(model.config.vq.loss_weight));
                g.tape.add(mse, weighted)?
            }
            None => mse,
        };
        loss.total = g.tape.value(total).item().as_f64();
        if !loss.total.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss {} (mse {}, codebook {}, commitment {})",
                loss.total, loss.mse, loss.codebook, loss.commitment
            )));
        }
        g.backward(total)?;
        (g.finish(), loss)
    };
    effects.apply(&mut model.params, &mut model.buffers);
    Ok(loss)
}

/// Eval-mode losses over a dataset, averaged per sample.
pub fn eval_loss<T: Real>(model: &Model<T>, data: &Dataset, batch_size: usize) -> Result<BatchLoss> {
    if data.is_empty() {
        return Err(Error::Usage("cannot compute a loss on an empty dataset".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut acc = BatchLoss::default();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let mut g = model.graph(Mode::Eval);
        let xv = g.tape.constant(x.cast());
        let yv = g.tape.constant(y.cast());
        let out = model.forward(&mut g, xv)?;
        let mse = g.tape.mse(out.prediction, yv)?;
        let w = chunk.len() as f64;
        let mut l = BatchLoss { mse: g.tape.value(mse).item().as_f64(), ..Default::default() };
        l.total = l.mse;
        if let Some(vq) = &out.vq {
            l.codebook = g.tape.value(vq.codebook_term).item().as_f64();
            l.commitment = g.tape.value(vq.commitment_term).item().as_f64();
            l.total += model.config.vq.loss_weight * (l.codebook + l.commitment);
        }
        acc.total += w * l.total;
        acc.mse += w * l.mse;
        acc.codebook += w * l.codebook;
        acc.commitment += w * l.commitment;
    }
    let n = data.len() as f64;
    Ok(BatchLoss { total: acc.total / n, mse: acc.mse / n, codebook: acc.codebook / n, commitment: acc.commitment / n })
}

/// What the per-epoch observer asks the trainer to do next.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Train with the default observer (never stops early by itself).
pub fn train<T: Real>(model: &mut Model<T>, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, train, val, cfg, |_, _| Control::Continue)
}

/// Train, calling `observe` after every epoch. On return the model holds the
/// parameters and buffers of the epoch with the lowest validation loss.
pub fn train_with<T: Real>(
    model: &mut Model<T>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&Model<T>, &EpochRecord) -> Control,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Usage("training needs non-empty train and validation sets".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model.params);
    let mut schedule = PlateauSchedule::new(cfg.lr, cfg.lr_factor, cfg.lr_patience, cfg.early_stop_patience);
    let mut best: Option<(ParamStore<T>, BufferStore<T>)> = None;
    let mut outcome = TrainOutcome { history: Vec::new(), best_epoch: 0, best_val_loss: f64::INFINITY, stopped_early: false };
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let lr = schedule.lr;
        let mut sums = BatchLoss::default();
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train.batch(chunk)?;
            model.params.zero_grad();
            let l = train_batch(model, &x.cast(), &y.cast()).map_err(|e| match e {
                Error::Training(m) => Error::Training(format!("epoch {epoch}: {m}")),
                other => other,
            })?;
            adam.step(&mut model.params, lr)?;
            let w = chunk.len() as f64;
            sums.total += w * l.total;
            sums.codebook += w * l.codebook;
            sums.commitment += w * l.commitment;
        }
        model.params.zero_grad();
        let n = train.len() as f64;
        let val_loss = eval_loss(model, val, cfg.batch_size)?.total;
        if !val_loss.is_finite() {
            return Err(Error::Training(format!("epoch {epoch}: non-finite validation loss {val_loss}")));
        }
        let record = EpochRecord {
            epoch,
            train_loss: sums.total / n,
            val_loss,
            lr,
            vq_codebook_term: sums.codebook / n,
            vq_commitment_term: sums.commitment / n,
        };
        outcome.history.push(record);
        let event = schedule.observe(val_loss);
        if event.improved {
            best = Some((model.params.clone(), model.buffers.clone()));
            outcome.best_epoch = epoch;
            outcome.best_val_loss = val_loss;
        }
        if observe(model, &record) == Control::Stop {
            break;
        }
        if event.stop {
            outcome.stopped_early = true;
            break;
        }
    }
    if let Some((params, buffers)) = best {
        model.params = params;
        model.buffers = buffers;
    }
    Ok(outcome)
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,lr,vq_codebook_term,vq_commitment_term";

pub fn write_history_csv(out: &mut impl Write, history: &[EpochRecord]) -> std::io::Result<()> {
    writeln!(out, "{HISTORY_HEADER}")?;
    for r in history {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.epoch, r.train_loss, r.val_loss, r.lr, r.vq_codebook_term, r.vq_commitment_term
        )?;
    }
    Ok(())
}
