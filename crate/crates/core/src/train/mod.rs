//! Two-stage training: single-scale pretraining of the base model, then
//! end-to-end fine-tuning of a recurrent head initialized from it.

mod augment;
mod eval;
mod optim;

pub use augment::{augment, augment_with, CROP_PAD};
pub use eval::{topk_error, topk_misses, PreparedSet, PreparedShard, TopK, EVAL_SHARD};
pub use optim::{sgd_nesterov_step, step_model, OptimizerState};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::exec::map_ordered;
use crate::model::{
    pyramid_batch, AnyModel, BaseCnnConfig, Head, ScaleClassifier, SingleScale, SrnnHalfGru, SrnnVanilla,
};
use crate::numerics::{Graph, Tensor};
use crate::vision::{build_pyramid, Image};

/// Samples per gradient shard. Shard gradients are summed in shard order,
/// so a step does not depend on how many threads computed it.
pub const GRAD_SHARD: usize = 8;

const STREAM_INIT: u64 = 0;
const STREAM_PRETRAIN: u64 = 1;
const STREAM_FINETUNE: u64 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
    /// Epochs of the selected head's stage.
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Pyramid sizes, strictly ascending.
    pub scales: Vec<(usize, usize)>,
    pub head: Head,
    /// Single-scale epochs run before a recurrent head is fine-tuned.
    pub pretrain_epochs: usize,
    /// Initial rate of the pretraining stage; it decays on the same schedule.
    pub pretrain_lr: f64,
    pub augment: bool,
}

impl TrainConfig {
    /// Optimizer and schedule of the reference ImageNet recipe.
    pub fn imagenet() -> Self {
        Self {
            lr0: 0.001,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 1e-4,
            decay_every: 30,
            decay_factor: 0.1,
            epochs: 65,
            batch_size: 256,
            seed: 0,
            scales: vec![(224, 224), (448, 448)],
            head: Head::SrnnHalfGru,
            pretrain_epochs: 0,
            pretrain_lr: 0.1,
            augment: true,
        }
    }

    /// Same optimizer with the schedule shrunk for the synthetic task.
    pub fn desk() -> Self {
        Self {
            lr0: 0.003,
            decay_every: 15,
            epochs: 20,
            batch_size: 32,
            scales: vec![(16, 16), (32, 32), (64, 64)],
            pretrain_epochs: 15,
            pretrain_lr: 0.02,
            ..Self::imagenet()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if [self.lr0, self.pretrain_lr].iter().any(|r| r.is_nan() || *r <= 0.0) {
            return bad(format!(
                "learning rates must be positive, got {} and {}",
                self.lr0, self.pretrain_lr
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return bad(format!("decay_factor must lie in (0, 1), got {}", self.decay_factor));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.decay_every == 0 {
            return bad("epochs, batch_size and decay_every must be at least 1".into());
        }
        if self.scales.is_empty() {
            return bad("at least one scale is required".into());
        }
        if self.scales.windows(2).any(|w| w[0].0 * w[0].1 >= w[1].0 * w[1].1) {
            return bad("scales must be listed in strictly ascending size".into());
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// `lr₀ · factor^⌊epoch / decay_every⌋`, applying the factor once per
/// elapsed period.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    schedule(cfg.lr0, cfg, epoch)
}

fn schedule(lr0: f64, cfg: &TrainConfig, epoch: usize) -> f64 {
    let mut lr = lr0;
    for _ in 0..epoch / cfg.decay_every.max(1) {
        lr *= cfg.decay_factor;
    }
    lr
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean mini-batch loss over the epoch.
    pub train_loss: f64,
    pub val_top1: f64,
    pub val_top5: f64,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// Single-scale model the head was initialized from.
    pub pretrained: SingleScale,
    pub pretrain_history: Vec<EpochRecord>,
    pub model: AnyModel,
    pub history: Vec<EpochRecord>,
}

/// Seeded random single-scale model.
pub fn init_single(config: BaseCnnConfig, classes: usize, seed: u64) -> SingleScale {
    SingleScale::init(config, classes, &mut stream(seed, STREAM_INIT, 0))
}

fn stream(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 32) | index);
    rng
}

/// Trains `cfg.head` starting from `base`.
///
/// `single` trains the base for `epochs`. A recurrent head first pretrains
/// the base for `pretrain_epochs` (skipped when 0) and then fine-tunes the
/// recurrent model end-to-end for `epochs`. Ensemble heads have nothing to
/// train and are rejected.
pub fn fit(cfg: &TrainConfig, train: &Dataset, val: &Dataset, base: SingleScale) -> Result<FitOutcome> {
    fit_with(cfg, train, val, base, &mut |_, _| {})
}

/// Callback receiving the stage name (`pretrain` or the head name) and
/// each finished epoch.
pub type Progress<'a> = &'a mut dyn FnMut(&str, &EpochRecord);

/// [`fit`] reporting every epoch to `progress`.
pub fn fit_with(
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    base: SingleScale,
    progress: Progress<'_>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if cfg.head.is_ensemble() {
        return Err(Error::contract(format!(
            "`{}` is inference-only; train `single` and evaluate the ensemble",
            cfg.head
        )));
    }
    if train.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let val_set = PreparedSet::new(val, &cfg.scales)?;
    if cfg.head == Head::Single {
        let mut model = base;
        let stage = Stage::single(Head::Single.name(), cfg.epochs, cfg.lr0);
        let history = run_stage(&mut model, cfg, train, &val_set, stage, progress)?;
        return Ok(FitOutcome {
            pretrained: model.clone(),
            pretrain_history: Vec::new(),
            model: AnyModel::Single(model),
            history,
        });
    }
    let mut pretrained = base;
    let mut pretrain_history = Vec::new();
    if cfg.pretrain_epochs > 0 {
        let stage = Stage::single("pretrain", cfg.pretrain_epochs, cfg.pretrain_lr);
        pretrain_history = run_stage(&mut pretrained, cfg, train, &val_set, stage, progress)?;
    }
    let (model, history) = fine_tune_prepared(cfg, train, &val_set, &pretrained, progress)?;
    Ok(FitOutcome {
        pretrained,
        pretrain_history,
        model,
        history,
    })
}

/// Fine-tunes `cfg.head` from an already trained single-scale model.
pub fn fine_tune(
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    pretrained: &SingleScale,
) -> Result<(AnyModel, Vec<EpochRecord>)> {
    fine_tune_with(cfg, train, val, pretrained, &mut |_, _| {})
}

/// [`fine_tune`] reporting every epoch to `progress`.
pub fn fine_tune_with(
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    pretrained: &SingleScale,
    progress: Progress<'_>,
) -> Result<(AnyModel, Vec<EpochRecord>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    fine_tune_prepared(cfg, train, &PreparedSet::new(val, &cfg.scales)?, pretrained, progress)
}

fn fine_tune_prepared(
    cfg: &TrainConfig,
    train: &Dataset,
    val: &PreparedSet,
    pretrained: &SingleScale,
    progress: Progress<'_>,
) -> Result<(AnyModel, Vec<EpochRecord>)> {
    let stage = Stage {
        name: cfg.head.name(),
        stream: STREAM_FINETUNE,
        epochs: cfg.epochs,
        lr0: cfg.lr0,
        single_scale: false,
    };
    match cfg.head {
        Head::SrnnVanilla => {
            let mut m = SrnnVanilla::from_pretrained(pretrained);
            let h = run_stage(&mut m, cfg, train, val, stage, progress)?;
            Ok((AnyModel::Vanilla(m), h))
        }
        Head::SrnnHalfGru => {
            let mut m = SrnnHalfGru::from_pretrained(pretrained);
            let h = run_stage(&mut m, cfg, train, val, stage, progress)?;
            Ok((AnyModel::HalfGru(m), h))
        }
        other => Err(Error::contract(format!("`{other}` is not a recurrent head"))),
    }
}

#[derive(Clone, Copy, Debug)]
struct Stage {
    name: &'static str,
    stream: u64,
    epochs: usize,
    lr0: f64,
    /// Each batch is trained at one scale drawn uniformly from the pyramid
    /// sizes; otherwise every batch carries the full pyramid.
    single_scale: bool,
}

impl Stage {
    fn single(name: &'static str, epochs: usize, lr0: f64) -> Self {
        Self {
            name,
            stream: STREAM_PRETRAIN,
            epochs,
            lr0,
            single_scale: true,
        }
    }
}

fn run_stage<M: ScaleClassifier>(
    model: &mut M,
    cfg: &TrainConfig,
    train: &Dataset,
    val: &PreparedSet,
    stage: Stage,
    progress: Progress<'_>,
) -> Result<Vec<EpochRecord>> {
    let mut state = OptimizerState::for_model(model);
    let eval_levels: Vec<usize> = if stage.single_scale {
        vec![cfg.scales.len() - 1]
    } else {
        (0..cfg.scales.len()).collect()
    };
    let mut history = Vec::with_capacity(stage.epochs);
    for epoch in 0..stage.epochs {
        let lr = schedule(stage.lr0, cfg, epoch);
        let mut batch_rng = stream(cfg.seed, stage.stream, 2 * epoch as u64);
        let mut scale_rng = stream(cfg.seed, stage.stream, 2 * epoch as u64 + 1);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in batches(train, cfg.batch_size, &mut batch_rng, cfg.augment)? {
            let sizes: Vec<(usize, usize)> = if stage.single_scale {
                vec![cfg.scales[scale_rng.gen_range(0..cfg.scales.len())]]
            } else {
                cfg.scales.clone()
            };
            let (loss, grads) = batch_gradient(&*model, &batch.images, &batch.labels, &sizes).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { epoch },
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            step_model(model, &grads, &mut state, lr, cfg)?;
            loss_sum += loss * batch.labels.len() as f64;
            seen += batch.labels.len();
        }
        let top = val.evaluate(&eval_levels, |levels| model.infer(levels))?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / seen.max(1) as f64,
            val_top1: top.top1,
            val_top5: top.top5,
        };
        progress(stage.name, &record);
        history.push(record);
    }
    Ok(history)
}

/// Mean cross-entropy of one mini-batch and its gradient for every model
/// parameter, in `named_params` order.
pub fn batch_gradient<M: ScaleClassifier + ?Sized>(
    model: &M,
    images: &[Image],
    labels: &[usize],
    sizes: &[(usize, usize)],
) -> Result<(f64, Vec<Tensor>)> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::contract(format!(
            "batch of {} images and {} labels",
            images.len(),
            labels.len()
        )));
    }
    let weight = 1.0 / images.len() as f64;
    let shards: Vec<(&[Image], &[usize])> = images.chunks(GRAD_SHARD).zip(labels.chunks(GRAD_SHARD)).collect();
    let parts = map_ordered(&shards, |(imgs, ys)| -> Result<(f64, Vec<Tensor>)> {
        let pyramids = imgs
            .iter()
            .map(|img| build_pyramid(img, sizes))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = pyramids.iter().collect();
        let mut g = Graph::new();
        let levels: Vec<_> = pyramid_batch(&refs)?.into_iter().map(|t| g.constant(t)).collect();
        let out = model.forward(&mut g, &levels)?;
        let loss = g.cross_entropy_scaled(out.logits, ys, weight)?;
        let mut grads = g.backward(loss)?;
        let tensors = out
            .params
            .iter()
            .map(|&p| grads.take(p).unwrap_or_else(|| Tensor::zeros(g.value(p).shape())))
            .collect();
        Ok((g.value(loss).item(), tensors))
    });
    let mut total = 0.0;
    let mut sum: Option<Vec<Tensor>> = None;
    for part in parts {
        let (loss, grads) = part?;
        total += loss;
        match sum.as_mut() {
            None => sum = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.add_assign(g)?;
                }
            }
        }
    }
    Ok((total, sum.expect("at least one shard")))
}

#[cfg(test)]
mod tests;
