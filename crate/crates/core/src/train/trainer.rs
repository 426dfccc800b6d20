//! The epoch loop.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::LossConfig;
use super::metrics::{iou_metrics, restricted_argmax, shape_iou, ConfusionMatrix, IouReport, PartTaxonomy};
use super::optim::{cosine_lr, Ema, OptimConfig, Sgd};
use crate::backbone::{HeadKind, Model, Plan, Sampling};
use crate::error::{Error, Result};
use crate::geom::Point;
use crate::tensor::{Graph, Mode, ParamStore, Real, Tensor};

/// One labelled cloud. `label` is the class for classifiers and the object
/// category for part segmenters, which also need `parts`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub points: Vec<Point<f32>>,
    pub label: usize,
    pub parts: Option<Vec<usize>>,
}

impl Sample {
    pub fn new(points: Vec<Point<f32>>, label: usize) -> Self {
        Sample {
            points,
            label,
            parts: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub batch_size: usize,
    /// Drives shuffling, dropout and random sampling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optim: OptimConfig::default(),
            loss: LossConfig::default(),
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.optim.validate()?;
        self.loss.validate(n_classes)
    }
}

/// Summary of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Accuracy of the training-mode predictions made during the epoch.
    pub train_oa: f64,
    /// Held-out accuracy of the averaged weights (the raw ones without an
    /// average).
    pub test_oa: Option<f64>,
    /// Held-out accuracy of the raw weights.
    pub test_oa_raw: Option<f64>,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} lr={:.6} loss={:.4} train_oa={:.4}",
            self.epoch, self.lr, self.loss, self.train_oa
        )?;
        if let Some(oa) = self.test_oa {
            write!(f, " test_oa={oa:.4}")?;
        }
        if let Some(oa) = self.test_oa_raw {
            write!(f, " test_oa_raw={oa:.4}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport<T: Real> {
    pub epochs: Vec<EpochLog>,
    /// Averaged weights, when configured.
    pub ema: Option<ParamStore<T>>,
}

/// Plan seed of sample `index` in epoch `epoch`.
fn plan_seed(seed: u64, epoch: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(index as u64);
    rng.next_u64()
}

/// Geometry of every sample. Random sampling draws from `seed`.
pub fn build_plans<T: Real>(model: &Model<T>, samples: &[Sample], seed: u64) -> Result<Vec<Plan>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| model.plan(&s.points, plan_seed(seed, 0, i)))
        .collect()
}

fn targets(model_head: HeadKind, batch: &[&Sample]) -> Result<Vec<usize>> {
    match model_head {
        HeadKind::Classify => Ok(batch.iter().map(|s| s.label).collect()),
        HeadKind::PartSegment => {
            let mut out = Vec::new();
            for s in batch {
                let parts = s
                    .parts
                    .as_ref()
                    .ok_or_else(|| Error::invalid("segmentation sample without part labels"))?;
                if parts.len() != s.points.len() {
                    return Err(Error::shape(
                        "targets",
                        format!("{} parts for {} points", parts.len(), s.points.len()),
                    ));
                }
                out.extend_from_slice(parts);
            }
            Ok(out)
        }
    }
}

fn row_argmax<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let c = logits.cols();
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Trains `model` in place with momentum SGD on a cosine schedule,
/// calling `on_epoch` after each epoch. With a non-empty `test` set every
/// epoch is evaluated.
pub fn fit<T: Real>(
    model: &mut Model<T>,
    train: &[Sample],
    test: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport<T>> {
    let mcfg = model.config().clone();
    cfg.validate(mcfg.n_classes)?;
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let seg = mcfg.head == HeadKind::PartSegment;
    let mut sgd = Sgd::new(model.store(), cfg.optim.momentum, cfg.optim.weight_decay);
    let mut ema = cfg.optim.ema_rho.map(|rho| Ema::new(model.store(), rho));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut plans = build_plans(model, train, cfg.seed)?;
    let test_plans = build_plans(model, test, cfg.seed.wrapping_add(1))?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::with_capacity(cfg.optim.epochs);
    for epoch in 0..cfg.optim.epochs {
        if epoch > 0 && mcfg.sampling == Sampling::Random {
            plans = train
                .iter()
                .enumerate()
                .map(|(i, s)| model.plan(&s.points, plan_seed(cfg.seed, epoch as u64, i)))
                .collect::<Result<_>>()?;
        }
        let lr = cosine_lr(epoch, &cfg.optim);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        let (mut hits, mut seen) = (0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let refs: Vec<&Plan> = chunk.iter().map(|&i| &plans[i]).collect();
            let cats: Vec<usize> = batch.iter().map(|s| s.label).collect();
            let tgt = targets(mcfg.head, &batch)?;
            model.store_mut().zero_grad();
            let mut g = Graph::new(Mode::Train, rng.next_u64());
            let logits = model.forward(&mut g, &refs, seg.then_some(cats.as_slice()))?;
            let loss = cfg.loss.apply(&mut g, logits, &tgt)?;
            let value = g.value(loss).data()[0].f64();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            let pred = row_argmax(g.value(logits));
            hits += pred.iter().zip(&tgt).filter(|(p, t)| p == t).count();
            seen += tgt.len();
            g.backward(loss, model.store_mut())?;
            g.commit_stats(model.store_mut());
            sgd.step(model.store_mut(), lr)?;
            if let Some(e) = ema.as_mut() {
                e.update(model.store())?;
            }
            loss_sum += value;
            batches += 1;
        }
        let (test_oa, test_oa_raw) = if test.is_empty() {
            (None, None)
        } else {
            let raw = evaluate(model, model.store(), test, &test_plans, cfg.batch_size, None)?
                .confusion
                .oa();
            let avg = match &ema {
                Some(e) => evaluate(model, e.shadow(), test, &test_plans, cfg.batch_size, None)?
                    .confusion
                    .oa(),
                None => raw,
            };
            (Some(avg), Some(raw))
        };
        let log = EpochLog {
            epoch,
            lr,
            loss: loss_sum / batches as f64,
            train_oa: hits as f64 / seen.max(1) as f64,
            test_oa,
            test_oa_raw,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(TrainReport {
        epochs: logs,
        ema: ema.map(Ema::into_shadow),
    })
}

/// Held-out scores.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Over classes, or over part labels for segmenters.
    pub confusion: ConfusionMatrix,
    /// Segmenters only, and only when a taxonomy is given.
    pub iou: Option<IouReport>,
}

/// Eval-mode scores of `samples` under the weights in `store`. Part
/// predictions are restricted to the parts of each shape's category.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    store: &ParamStore<T>,
    samples: &[Sample],
    plans: &[Plan],
    batch_size: usize,
    taxonomy: Option<&PartTaxonomy>,
) -> Result<Evaluation> {
    if samples.len() != plans.len() {
        return Err(Error::shape(
            "evaluate",
            format!("{} samples, {} plans", samples.len(), plans.len()),
        ));
    }
    let cfg = model.config();
    let seg = cfg.head == HeadKind::PartSegment;
    if let Some(t) = taxonomy {
        if t.total_parts() != cfg.n_classes || t.categories() != cfg.seg_categories {
            return Err(Error::Config("taxonomy does not match the segmentation head".into()));
        }
    }
    let mut confusion = ConfusionMatrix::new(cfg.n_classes);
    let mut shapes = Vec::new();
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
        let refs: Vec<&Plan> = chunk.iter().map(|&i| &plans[i]).collect();
        let cats: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let tgt = targets(cfg.head, &batch)?;
        let mut g = Graph::new(Mode::Eval, 0);
        let out = model.forward_with(&mut g, store, &refs, seg.then_some(cats.as_slice()))?;
        let logits = g.value(out);
        match taxonomy.filter(|_| seg) {
            Some(tax) => {
                let c = logits.cols();
                let wide: Vec<f64> = logits.data().iter().map(|v| v.f64()).collect();
                let mut row = 0;
                for s in &batch {
                    let n = s.points.len();
                    let parts = tax.parts(s.label)?;
                    let pred = restricted_argmax(&wide[row * c..(row + n) * c], c, parts.clone())?;
                    let truth = &tgt[row..row + n];
                    confusion.add_all(truth, &pred)?;
                    shapes.push((s.label, shape_iou(&pred, truth, parts)?));
                    row += n;
                }
            }
            None => confusion.add_all(&tgt, &row_argmax(logits))?,
        }
    }
    let iou = if shapes.is_empty() {
        None
    } else {
        Some(iou_metrics(taxonomy.expect("shapes imply a taxonomy"), &shapes)?)
    };
    Ok(Evaluation { confusion, iou })
}
