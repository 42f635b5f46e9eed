//! Optimization and evaluation: AdamW, reduce-on-plateau, the training
//! loop with per-epoch history, and dataset evaluation.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{augment, stack_images, AugmentConfig, Sample};
use crate::error::{Error, Result};
use crate::losses::{
    binary_combined, binary_target, class_weights, multiclass_combined, one_hot, LossConfig,
};
use crate::mask::Mask;
use crate::metrics::{ConfusionCounts, MetricsReport};
use crate::model::{predict_mask, Model};
use crate::nn::{init_rng, Ctx, Mode, Module};
use crate::tensor::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    /// A validation loss counts as an improvement only if it beats the
    /// best so far by more than this.
    pub min_delta: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-5,
            batch_size: 8,
            epochs: 200,
            plateau_patience: 5,
            plateau_factor: 0.5,
            min_delta: 1e-6,
            seed: 0,
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "invalid learning rate {} or weight decay {}",
                self.lr, self.weight_decay
            )));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) || self.plateau_patience == 0 {
            return Err(Error::Config(
                "plateau factor must lie in (0, 1) and patience be at least 1".into(),
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch size and epoch count must be at least 1".into(),
            ));
        }
        self.loss.binary.validate()?;
        self.loss.multiclass.validate()?;
        self.augment.validate()
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with decoupled weight decay. Moments are kept per trainable
/// parameter in declaration order.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// `p ← p·(1 − lr·wd)`, then the bias-corrected Adam update.
    pub fn step<M: Module + ?Sized>(&mut self, module: &mut M) -> Result<()> {
        let mut missing = None;
        module.visit(&mut |p| {
            if p.trainable() && p.value.grad().is_none() && missing.is_none() {
                missing = Some(p.name().to_string());
            }
        });
        if let Some(name) = missing {
            return Err(Error::MissingGradient { name });
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let decay = 1.0 - self.lr * self.weight_decay;
        let (lr, eps) = (self.lr, self.eps);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut i = 0;
        module.visit_mut(&mut |p| {
            if !p.trainable() {
                return;
            }
            if ms.len() == i {
                ms.push(vec![0.0; p.numel()]);
                vs.push(vec![0.0; p.numel()]);
            }
            let g = p.value.grad().expect("checked above").to_vec();
            let (m, v) = (&mut ms[i], &mut vs[i]);
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                *w *= decay;
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                *w -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
            i += 1;
        });
        Ok(())
    }
}

/// Multiply the learning rate by `factor` once the monitored loss has
/// failed to improve for `patience` consecutive epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub best: f64,
    pub stale: usize,
}

impl Plateau {
    pub fn new(lr: f64, factor: f64, patience: usize, min_delta: f64) -> Self {
        Self {
            lr,
            factor,
            patience,
            min_delta,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Feed one epoch's loss; returns the new rate when it was reduced.
    pub fn step(&mut self, loss: f64) -> Option<f64> {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.stale = 0;
            return None;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.lr *= self.factor;
            self.stale = 0;
            return Some(self.lr);
        }
        None
    }
}

/// Loss on class probabilities for the model's head type. `weights` is
/// used only with two or more classes.
pub fn segmentation_loss(
    model: &Model,
    logits: &Var,
    masks: &[Mask],
    loss: &LossConfig,
    weights: &[f64],
) -> Result<Var> {
    let probs = model.probabilities(logits)?;
    let tape = logits.tape();
    if model.config.classes == 1 {
        let target = tape.constant(&binary_target(masks)?);
        binary_combined(&probs, &target, &loss.binary)
    } else {
        let target = tape.constant(&one_hot(masks, model.config.classes)?);
        multiclass_combined(&probs, &target, weights, &loss.multiclass)
    }
}

/// Class weights for a training set: configured ones, or inverse frequency.
pub fn resolve_class_weights(
    model: &Model,
    loss: &LossConfig,
    train: &[Sample],
) -> Result<Vec<f64>> {
    let k = model.config.classes;
    if k == 1 {
        return Ok(Vec::new());
    }
    match &loss.multiclass.class_weights {
        Some(w) if w.len() == k => Ok(w.clone()),
        Some(w) => Err(Error::Config(format!(
            "{} class weights configured for {k} classes",
            w.len()
        ))),
        None => class_weights(&train.iter().map(|s| s.mask.clone()).collect::<Vec<_>>(), k),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub report: MetricsReport,
}

/// Eval-mode loss and metrics over `samples`.
pub fn evaluate(
    model: &Model,
    samples: &[Sample],
    batch_size: usize,
    loss: &LossConfig,
    weights: &[f64],
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
    }
    let mut counts = ConfusionCounts::new(model.config.classes.max(2));
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let mut ctx = Ctx::new(&Tape::no_grad(), Mode::Eval);
        let x = ctx.tape.constant(&stack_images(&refs)?);
        let logits = model.forward(&mut ctx, &x)?;
        let masks: Vec<Mask> = chunk.iter().map(|s| s.mask.clone()).collect();
        total +=
            segmentation_loss(model, &logits, &masks, loss, weights)?.item() * chunk.len() as f64;
        for (p, s) in predict_mask(&logits.value())?.iter().zip(chunk) {
            counts.add(p, &s.mask)?;
        }
    }
    Ok(Evaluation {
        loss: total / samples.len() as f64,
        report: MetricsReport::from_counts(&counts),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Rate used during this epoch.
    pub lr: f64,
    #[serde(rename = "mIoU")]
    pub miou: f64,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best: Evaluation,
    pub checkpoint: Option<PathBuf>,
}

pub const HISTORY_FILE: &str = "history.csv";
pub const CHECKPOINT_FILE: &str = "best.ckpt";

pub fn write_history(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in history {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

/// Train `model` in place. With `out`, the history CSV is rewritten after
/// every epoch and the best-validation weights are saved as a checkpoint.
/// Every random draw (shuffling, augmentation) derives from `config.seed`.
pub fn train(
    model: &mut Model,
    train_set: &[Sample],
    val_set: &[Sample],
    config: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Usage(
            "training needs non-empty train and validation sets".into(),
        ));
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let weights = resolve_class_weights(model, &config.loss, train_set)?;
    let mut opt = AdamW::new(config.lr, config.weight_decay);
    let mut sched = Plateau::new(
        config.lr,
        config.plateau_factor,
        config.plateau_patience,
        config.min_delta,
    );
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, Evaluation)> = None;
    let ckpt_path = out.map(|d| d.join(CHECKPOINT_FILE));

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut init_rng(config.seed, &format!("shuffle/{epoch}")));
        let lr = opt.lr;
        let mut sum = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    let s = &train_set[i];
                    if config.augment.is_identity() {
                        s.clone()
                    } else {
                        augment(
                            s,
                            &config.augment,
                            &mut init_rng(config.seed, &format!("augment/{epoch}/{}", s.id)),
                        )
                    }
                })
                .collect();
            let refs: Vec<&Sample> = batch.iter().collect();
            let mut ctx = Ctx::new(&Tape::new(), Mode::Train);
            let x = ctx.tape.constant(&stack_images(&refs)?);
            let logits = model.forward(&mut ctx, &x)?;
            let masks: Vec<Mask> = batch.iter().map(|s| s.mask.clone()).collect();
            let loss = segmentation_loss(model, &logits, &masks, &config.loss, &weights)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b + 1,
                });
            }
            ctx.tape.backward(&loss)?;
            model.collect_grads(&ctx.tape);
            opt.step(model)?;
            ctx.apply_stat_updates(model);
            sum += value * chunk.len() as f64;
        }
        let eval = evaluate(model, val_set, config.batch_size, &config.loss, &weights)?;
        if !eval.loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: 0 });
        }
        history.push(EpochRecord {
            epoch,
            train_loss: sum / train_set.len() as f64,
            val_loss: eval.loss,
            lr,
            miou: eval.report.miou,
            dice: eval.report.dice,
            precision: eval.report.precision,
            recall: eval.report.recall,
        });
        if best.as_ref().is_none_or(|(_, b)| eval.loss < b.loss) {
            if let Some(p) = &ckpt_path {
                checkpoint::save(model, p, &checkpoint::Meta::trained(config, epoch))?;
            }
            best = Some((epoch, eval));
        }
        if let Some(lr) = sched.step(history[epoch - 1].val_loss) {
            opt.lr = lr;
        }
        if let Some(dir) = out {
            write_history(&history, &dir.join(HISTORY_FILE))?;
        }
    }
    let (best_epoch, best) =
        best.ok_or_else(|| Error::Usage("training ran for zero epochs".into()))?;
    Ok(TrainOutcome {
        history,
        best_epoch,
        best,
        checkpoint: ckpt_path,
    })
}
