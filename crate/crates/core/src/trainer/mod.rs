//! Two-step training loop and evaluation.
//!
//! Every batch runs an MIL step (shuffled bags through the MIL head) and a
//! CLS step (original bags through both heads). The three losses are summed
//! into one scalar and drive a single optimizer update.

mod metrics;
mod optim;

pub use metrics::{Confusion, MetricsReport};
pub use optim::{adam_update, Adam, AdamState, LrSchedule, ScheduleKind, ADAM_EPS, BETA1, BETA2};

use crate::bagging::{cls_distribute, compose_bag, mil_distribute_with, split_into_patches, Bag, BagSoftLabel, LabeledImage};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{argmax, Bound, Model, ModelConfig};
use crate::rng;
use crate::synthdata::{augment, AugConfig};
use crate::tensor::{Graph, Real, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// CLS head only.
    BackboneOnly,
    /// Both heads on un-shuffled bags.
    MilCls,
    /// MIL step on shuffled bags plus the CLS step.
    #[default]
    MilSi,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::BackboneOnly, Variant::MilCls, Variant::MilSi];

    pub fn name(self) -> &'static str {
        match self {
            Variant::BackboneOnly => "backbone_only",
            Variant::MilCls => "mil_cls",
            Variant::MilSi => "mil_si",
        }
    }

    fn uses_mil_step(self) -> bool {
        self == Variant::MilSi
    }

    fn uses_mil_head(self) -> bool {
        self != Variant::BackboneOnly
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub mil: f64,
    pub mil_cls: f64,
    pub cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mil: 1.0,
            mil_cls: 1.0,
            cls: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub lr_final_ratio: f64,
    pub schedule: ScheduleKind,
    pub seed: u64,
    /// Divide soft-label targets and predictions by the bag size.
    pub normalize_soft_label: bool,
    pub loss_weights: LossWeights,
    /// Images per forward pass during evaluation.
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            lr0: 3e-4,
            weight_decay: 0.05,
            lr_final_ratio: 1.0 / 20.0,
            schedule: ScheduleKind::Cosine,
            seed: 0,
            normalize_soft_label: true,
            loss_weights: LossWeights::default(),
            eval_batch: 16,
        }
    }

    pub fn full() -> Self {
        Self {
            lr0: 1e-5,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return bad("batch sizes must be >= 1");
        }
        if !(self.lr_final_ratio > 0.0 && self.lr_final_ratio <= 1.0) {
            return bad("lr_final_ratio must lie in (0, 1]");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) || !(self.weight_decay >= 0.0) {
            return bad("lr0 must be positive and weight_decay nonnegative");
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::new(self.lr0, self.lr_final_ratio, self.epochs, self.schedule)
    }
}

/// Loss components of one batch or averaged over an epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_mil: f64,
    pub l_mil_cls: f64,
    pub l_cls: f64,
    pub total: f64,
}

/// Loss nodes of one batch graph. Absent components are zero.
pub struct LossVars {
    pub l_mil: Option<Var>,
    pub l_mil_cls: Option<Var>,
    pub l_cls: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown<T: Real>(&self, g: &Graph<T>) -> LossBreakdown {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.scalar(x));
        LossBreakdown {
            l_mil: v(self.l_mil),
            l_mil_cls: v(self.l_mil_cls),
            l_cls: v(self.l_cls),
            total: g.scalar(self.total),
        }
    }
}

fn bags_of(model_cfg: &ModelConfig, batch: &[LabeledImage]) -> Result<Vec<Bag>> {
    if batch.is_empty() {
        return Err(Error::BagMismatch("empty batch".into()));
    }
    batch
        .iter()
        .map(|img| split_into_patches(img, model_cfg.patch_side, model_cfg.categories))
        .collect()
}

fn compose_all(bags: &[Bag], side: usize) -> Result<Vec<Image>> {
    bags.iter().map(|b| compose_bag(b, side)).collect()
}

fn soft_target<T: Real>(labels: &[BagSoftLabel], n: usize, normalize: bool) -> Result<Tensor<T>> {
    let div = if normalize { n as f64 } else { 1.0 };
    let k1 = labels.first().map_or(0, |l| l.to_vec().len());
    let data = labels
        .iter()
        .flat_map(|l| l.to_vec())
        .map(|v| T::of(v / div))
        .collect();
    Tensor::new(vec![labels.len(), k1], data)
}

fn soft_loss<T: Real>(
    model: &Model<T>,
    g: &mut Graph<T>,
    bound: &Bound,
    patch_tokens: Var,
    labels: &[BagSoftLabel],
    normalize: bool,
) -> Result<Var> {
    let n = model.config().num_patches();
    let pred = model.mil_head(g, bound, patch_tokens, n)?;
    let pred = if normalize { g.scale(pred, 1.0 / n as f64) } else { pred };
    g.mse(pred, &soft_target(labels, n, normalize)?)
}

/// MIL step on `g`: shuffle patches across the batch with `shuffle_seed`,
/// compose, and regress the shuffled bags' soft labels.
pub fn mil_step_graph<T: Real>(
    model: &Model<T>,
    g: &mut Graph<T>,
    bound: &Bound,
    batch: &[LabeledImage],
    shuffle_seed: u64,
    normalize: bool,
) -> Result<Var> {
    let cfg = model.config();
    let dist = mil_distribute_with(&bags_of(cfg, batch)?, shuffle_seed, true)?;
    let images = compose_all(&dist.bags, cfg.image_side)?;
    let out = model.backbone_forward(g, bound, &images)?;
    soft_loss(model, g, bound, out.patch_tokens, &dist.soft_labels, normalize)
}

/// CLS step on `g`: returns `(l_mil_cls, l_cls)`; the first is `None`
/// when `with_mil_head` is false.
pub fn cls_step_graph<T: Real>(
    model: &Model<T>,
    g: &mut Graph<T>,
    bound: &Bound,
    batch: &[LabeledImage],
    normalize: bool,
    with_mil_head: bool,
) -> Result<(Option<Var>, Var)> {
    let cfg = model.config();
    let (bags, labels) = cls_distribute(&bags_of(cfg, batch)?)?;
    let images = compose_all(&bags, cfg.image_side)?;
    let out = model.backbone_forward(g, bound, &images)?;
    let l_mil_cls = if with_mil_head {
        Some(soft_loss(model, g, bound, out.patch_tokens, &labels, normalize)?)
    } else {
        None
    };
    let logits = model.cls_head(g, bound, out.cls)?;
    let classes: Vec<usize> = batch.iter().map(|i| i.class_label as usize).collect();
    let l_cls = g.cross_entropy(logits, &classes)?;
    Ok((l_mil_cls, l_cls))
}

/// Builds the weighted composite loss for `variant` on one graph.
pub fn batch_loss_graph<T: Real>(
    model: &Model<T>,
    g: &mut Graph<T>,
    bound: &Bound,
    batch: &[LabeledImage],
    variant: Variant,
    shuffle_seed: u64,
    cfg: &TrainConfig,
) -> Result<LossVars> {
    let w = cfg.loss_weights;
    let l_mil = if variant.uses_mil_step() {
        Some(mil_step_graph(model, g, bound, batch, shuffle_seed, cfg.normalize_soft_label)?)
    } else {
        None
    };
    let (l_mil_cls, l_cls) =
        cls_step_graph(model, g, bound, batch, cfg.normalize_soft_label, variant.uses_mil_head())?;
    let mut total = g.scale(l_cls, w.cls);
    for (term, weight) in [(l_mil, w.mil), (l_mil_cls, w.mil_cls)] {
        if let Some(t) = term {
            let t = g.scale(t, weight);
            total = g.add(total, t)?;
        }
    }
    Ok(LossVars {
        l_mil,
        l_mil_cls,
        l_cls: Some(l_cls),
        total,
    })
}

/// Value of the MIL step loss alone.
pub fn mil_step<T: Real>(
    model: &Model<T>,
    batch: &[LabeledImage],
    shuffle_seed: u64,
    normalize: bool,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let l = mil_step_graph(model, &mut g, &bound, batch, shuffle_seed, normalize)?;
    let l_mil = g.scalar(l);
    Ok(LossBreakdown {
        l_mil,
        total: l_mil,
        ..LossBreakdown::default()
    })
}

/// Values of the CLS step losses.
pub fn cls_step<T: Real>(model: &Model<T>, batch: &[LabeledImage], normalize: bool) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let (mc, c) = cls_step_graph(model, &mut g, &bound, batch, normalize, true)?;
    let (l_mil_cls, l_cls) = (g.scalar(mc.expect("MIL head requested")), g.scalar(c));
    Ok(LossBreakdown {
        l_mil_cls,
        l_cls,
        total: l_mil_cls + l_cls,
        ..LossBreakdown::default()
    })
}

/// Shuffle seed for batch `batch` of epoch `epoch`.
pub fn shuffle_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    rng::derive_seed(seed, &[rng::tag::SHUFFLE, epoch as u64, batch as u64])
}

/// Loss and gradients (in parameter order) for one batch.
pub fn batch_gradients<T: Real>(
    model: &Model<T>,
    batch: &[LabeledImage],
    variant: Variant,
    shuffle_seed: u64,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let losses = batch_loss_graph(model, &mut g, &bound, batch, variant, shuffle_seed, cfg)?;
    let breakdown = losses.breakdown(&g);
    let grads = g.backward(losses.total)?;
    let out = bound
        .vars
        .iter()
        .zip(model.params())
        .map(|(&v, p)| grads.get_or_zeros(v, &p.value))
        .collect();
    Ok((breakdown, out))
}

/// CLS-head class predictions, `eval_batch` images per forward pass.
pub fn predict_classes<T: Real>(model: &Model<T>, images: &[Image], eval_batch: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(images.len());
    let c = model.config().num_classes;
    for chunk in images.chunks(eval_batch.max(1)) {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let fwd = model.backbone_forward(&mut g, &bound, chunk)?;
        let logits = model.cls_head(&mut g, &bound, fwd.cls)?;
        let v: Vec<f32> = g.value(logits).data().iter().map(|x| x.as_f64() as f32).collect();
        out.extend(v.chunks(c).map(argmax));
    }
    Ok(out)
}

/// Metrics of CLS-head predictions after the deterministic eval pipeline.
pub fn evaluate(model: &Model<f32>, split: &[LabeledImage], aug: &AugConfig, eval_batch: usize) -> Result<MetricsReport> {
    if split.is_empty() {
        return Err(Error::Config("cannot evaluate an empty split".into()));
    }
    let eval = aug.eval();
    let images = split
        .iter()
        .map(|img| Ok(augment(img, &eval, 0)?.pixels))
        .collect::<Result<Vec<_>>>()?;
    let predicted = predict_classes(model, &images, eval_batch)?;
    let actual: Vec<usize> = split.iter().map(|i| i.class_label as usize).collect();
    Ok(MetricsReport::from_predictions(&predicted, &actual))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub l_mil: f64,
    pub l_mil_cls: f64,
    pub l_cls: f64,
    pub total: f64,
    pub val_accuracy: f64,
}

pub const EPOCH_CSV_HEADER: &str = "epoch,lr,l_mil,l_mil_cls,l_cls,total,val_accuracy";

pub fn epochs_to_csv(log: &[EpochLog]) -> String {
    let mut s = String::from(EPOCH_CSV_HEADER);
    s.push('\n');
    for e in log {
        let _ = writeln!(
            s,
            "{},{:e},{},{},{},{},{}",
            e.epoch, e.lr, e.l_mil, e.l_mil_cls, e.l_cls, e.total, e.val_accuracy
        );
    }
    s
}

pub struct TrainOutcome {
    pub best: Model<f32>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub last: Model<f32>,
    pub log: Vec<EpochLog>,
}

/// Trains a fresh model (initialised from `cfg.seed`) and keeps the weights
/// with the highest validation accuracy; the earliest epoch wins ties.
pub fn train(
    train_split: &[LabeledImage],
    val_split: &[LabeledImage],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    aug: &AugConfig,
    variant: Variant,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    aug.validate()?;
    if aug.resize != model_cfg.image_side {
        return Err(Error::Config(format!(
            "augmentation output side {} differs from model image_side {}",
            aug.resize, model_cfg.image_side
        )));
    }
    if train_split.is_empty() || val_split.is_empty() {
        return Err(Error::Config("train and validation splits must be non-empty".into()));
    }
    let mut model = Model::new(model_cfg.clone(), cfg.seed)?;
    let mut opt = Adam::new(cfg.weight_decay);
    let schedule = cfg.schedule();
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_acc = f64::NEG_INFINITY;
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = schedule.lr(epoch);
        let mut order: Vec<usize> = (0..train_split.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[rng::tag::ORDER, epoch as u64]));
        let mut sum = LossBreakdown::default();
        let mut batches = 0usize;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = idx
                .iter()
                .map(|&i| {
                    let s = rng::derive_seed(cfg.seed, &[rng::tag::AUGMENT, epoch as u64, i as u64]);
                    augment(&train_split[i], aug, s)
                })
                .collect::<Result<Vec<_>>>()?;
            let (lb, grads) = batch_gradients(&model, &batch, variant, shuffle_seed(cfg.seed, epoch, bi), cfg)?;
            if !lb.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            opt.step(model.params_mut(), &grads, lr);
            sum.l_mil += lb.l_mil;
            sum.l_mil_cls += lb.l_mil_cls;
            sum.l_cls += lb.l_cls;
            sum.total += lb.total;
            batches += 1;
        }
        let k = batches as f64;
        let val = evaluate(&model, val_split, aug, cfg.eval_batch)?;
        let entry = EpochLog {
            epoch,
            lr,
            l_mil: sum.l_mil / k,
            l_mil_cls: sum.l_mil_cls / k,
            l_cls: sum.l_cls / k,
            total: sum.total / k,
            val_accuracy: val.accuracy,
        };
        log::info!(
            "{} epoch {epoch}: lr {lr:.3e} total {:.5} (mil {:.5}, mil_cls {:.5}, cls {:.5}) val_acc {:.4}",
            variant.name(),
            entry.total,
            entry.l_mil,
            entry.l_mil_cls,
            entry.l_cls,
            entry.val_accuracy
        );
        if val.accuracy > best_acc {
            best_acc = val.accuracy;
            best_epoch = epoch;
            best = model.clone();
        }
        log.push(entry);
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_accuracy: best_acc,
        last: model,
        log,
    })
}
