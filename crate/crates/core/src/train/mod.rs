//! Objectives, optimization, metrics and the training loop.

pub mod loss;
pub mod metrics;
pub mod optim;
pub mod trainer;

pub use loss::{class_weights, LossConfig, LossKind};
pub use metrics::{iou_metrics, restricted_argmax, shape_iou, ConfusionMatrix, IouReport, PartTaxonomy};
pub use optim::{cosine_lr, ema_update, Ema, OptimConfig, Sgd};
pub use trainer::{build_plans, evaluate, fit, EpochLog, Evaluation, Sample, TrainConfig, TrainReport};
