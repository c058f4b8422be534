//! Mini-batch training with validation-loss early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::AdamState;
use super::model::Model;
use crate::autograd::Tape;
use crate::data::{augment, stack_images, stratified_partition, AugmentFlags, Dataset, DatasetSplit};
use crate::error::{Error, Result};
use crate::layers::{Mode, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub dropout_rate: f32,
    pub val_fraction: f64,
    pub seed: u64,
    pub augment: AugmentFlags,
    pub freeze_backbone: bool,
    /// Assert finiteness after every forward op.
    pub checked: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            weight_decay: 1e-4,
            batch_size: 16,
            max_epochs: 50,
            patience: 5,
            dropout_rate: 0.5,
            val_fraction: 0.1,
            seed: 0,
            augment: AugmentFlags::default(),
            freeze_backbone: false,
            checked: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.weight_decay >= 0.0
            && self.patience >= 1
            && self.batch_size >= 1
            && self.max_epochs >= 1
            && self.val_fraction > 0.0
            && self.val_fraction < 1.0
            && (0.0..1.0).contains(&self.dropout_rate);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training configuration {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_oa: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were restored.
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Training-split samples held out for early stopping.
    pub val_indices: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    /// New best: keep a snapshot of the current parameters.
    Improved,
    Continue,
    Stop,
}

/// Stops once the monitored loss has failed to improve on its best value
/// for `patience` consecutive epochs.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            wait: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.wait = 0;
            return StopDecision::Improved;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

/// Mean cross-entropy and accuracy in eval mode.
pub(crate) fn eval_loss(model: &mut Model, dataset: &Dataset, indices: &[usize], batch: usize) -> Result<(f64, f64)> {
    let mut total = 0.0f64;
    let mut correct = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in indices.chunks(batch.max(1)) {
        let images = dataset.batch(chunk);
        let labels: Vec<usize> = chunk.iter().map(|&i| dataset.labels[i]).collect();
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let (ctx, logits) = model.forward(&mut tape, x, Mode::Eval, 0.0, &mut rng)?;
        let loss = ctx.tape.softmax_cross_entropy(logits, &labels)?;
        total += ctx.tape.value(loss).data()[0] as f64 * chunk.len() as f64;
        let k = labels.len();
        let z = ctx.tape.value(logits);
        let classes = z.dims()[1];
        for (row, &label) in z.data().chunks(classes).zip(&labels) {
            if super::eval::argmax(row) == label {
                correct += 1;
            }
        }
        debug_assert_eq!(k, chunk.len());
    }
    Ok((total / indices.len() as f64, correct as f64 / indices.len() as f64))
}

/// Trains `model` in place on the training part of `split` and restores
/// the parameters of the epoch with the lowest validation loss.
pub fn train(model: &mut Model, dataset: &Dataset, split: &DatasetSplit, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(&bad) = split.train_indices.iter().chain(&split.test_indices).find(|&&i| i >= dataset.len()) {
        return Err(Error::Data(format!("split index {bad} outside dataset of {}", dataset.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(split.split_id as u64);

    let (val, fit) = stratified_partition(
        &split.train_indices,
        &dataset.labels,
        dataset.n_classes(),
        cfg.val_fraction,
        &mut rng,
    );
    if val.is_empty() || fit.is_empty() {
        return Err(Error::Data(format!(
            "validation carve-out left {} training and {} validation samples",
            fit.len(),
            val.len()
        )));
    }

    model.set_backbone_frozen(cfg.freeze_backbone);
    let mut adam = AdamState::for_store(&model.store);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best: Option<ParamStore> = None;
    let mut history = Vec::new();
    let mut stopped_early = false;
    let mut order = fit.clone();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let images: Vec<_> = chunk
                .iter()
                .map(|&i| augment(&dataset.images[i], &mut rng, cfg.augment))
                .collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| dataset.labels[i]).collect();
            let mut tape = Tape::new().with_checks(cfg.checked);
            let x = tape.constant(stack_images(&images));
            let grads = {
                let (ctx, logits) = model.forward(&mut tape, x, Mode::Train, cfg.dropout_rate, &mut rng)?;
                let loss = ctx.tape.softmax_cross_entropy(logits, &labels)?;
                let value = ctx.tape.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(Error::NonFinite("training loss"));
                }
                loss_sum += value as f64 * chunk.len() as f64;
                ctx.tape.backward(loss)?;
                ctx.param_grads()
            };
            adam.step_store(&mut model.store, &grads, cfg.learning_rate, cfg.weight_decay)?;
        }
        let (val_loss, val_oa) = eval_loss(model, dataset, &val, cfg.batch_size.max(32))?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite("validation loss"));
        }
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / fit.len() as f64,
            val_loss,
            val_oa,
        });
        match stopper.observe(epoch, val_loss) {
            StopDecision::Improved => best = Some(model.store.clone()),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }

    if let Some(store) = best {
        model.store = store;
    }
    Ok(TrainOutcome {
        history,
        best_epoch: stopper.best_epoch(),
        stopped_early,
        val_indices: val,
    })
}
