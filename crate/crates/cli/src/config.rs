//! Run configs: flat `key = value` lines, `#` starting a comment.
//!
//! `preset` picks the base architecture and is applied before any other
//! key. Training keys are listed in [`TRAIN_KEYS`]; every other key must
//! be a model field. Relative paths resolve against the config's
//! directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use slnet_core::train::{LossConfig, OptimConfig, TrainConfig};
use slnet_core::{Error, ModelConfig};

use crate::error::{CliError, Result};

pub const TRAIN_KEYS: [&str; 14] = [
    "preset",
    "data",
    "out",
    "epochs",
    "lr",
    "lr_min",
    "momentum",
    "weight_decay",
    "ema_rho",
    "batch_size",
    "loss",
    "label_smoothing",
    "focal_gamma",
    "seed",
];

/// Everything a `train` invocation needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Whether `n_classes` was given; otherwise the dataset decides.
    pub n_classes_set: bool,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub train: TrainConfig,
}

fn bad(key: &str, value: &str) -> CliError {
    Error::Config(format!("invalid value `{value}` for `{key}`")).into()
}

fn num<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| bad(key, value))
}

impl RunConfig {
    /// Parses config text; `base` anchors relative paths.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        let mut order = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if pairs.insert(k.clone(), v).is_some() {
                return Err(Error::Config(format!("line {}: `{k}` set twice", i + 1)).into());
            }
            order.push(k);
        }
        let preset = pairs.get("preset").map_or("tiny", String::as_str);
        let mut model = ModelConfig::preset(preset)?;
        let mut optim = OptimConfig::default();
        let mut loss = LossConfig::default();
        let mut train = TrainConfig::default();
        let (mut data, mut out) = (None, None);
        for k in &order {
            let v = pairs[k].as_str();
            match k.as_str() {
                "preset" => {}
                "data" => data = Some(base.join(v)),
                "out" => out = Some(base.join(v)),
                "epochs" => optim.epochs = num(k, v)?,
                "lr" => optim.lr0 = num(k, v)?,
                "lr_min" => optim.lr_min = num(k, v)?,
                "momentum" => optim.momentum = num(k, v)?,
                "weight_decay" => optim.weight_decay = num(k, v)?,
                "ema_rho" => optim.ema_rho = if v == "none" { None } else { Some(num(k, v)?) },
                "batch_size" => train.batch_size = num(k, v)?,
                "loss" => loss.kind = v.parse()?,
                "label_smoothing" => loss.label_smoothing = num(k, v)?,
                "focal_gamma" => loss.gamma = num(k, v)?,
                "seed" => train.seed = num(k, v)?,
                key => model.set(key, v)?,
            }
        }
        optim.validate()?;
        train.optim = optim;
        train.loss = loss;
        Ok(RunConfig {
            model,
            n_classes_set: pairs.contains_key("n_classes"),
            data,
            out,
            train,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }
}
