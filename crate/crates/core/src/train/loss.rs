//! Classification objectives.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Softmax cross-entropy.
    Ce,
    /// Cross-entropy with inverse-square-root class-frequency weights.
    Wce,
    /// Focal loss.
    Focal,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Ce => "ce",
            LossKind::Wce => "wce",
            LossKind::Focal => "focal",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossKind::Ce),
            "wce" => Ok(LossKind::Wce),
            "focal" => Ok(LossKind::Focal),
            other => Err(Error::Config(format!("unknown loss `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Mass moved off the true class, spread evenly over the others.
    /// Ignored by the focal loss.
    pub label_smoothing: f64,
    /// Focal exponent.
    pub gamma: f64,
    /// Per-class sample counts; required by [`LossKind::Wce`].
    pub class_freqs: Option<Vec<f64>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::Ce,
            label_smoothing: 0.1,
            gamma: 2.0,
            class_freqs: None,
        }
    }
}

/// `1/sqrt(f_c)` rescaled to mean 1.
pub fn class_weights(freqs: &[f64]) -> Result<Vec<f64>> {
    if freqs.is_empty() {
        return Err(Error::invalid("no class frequencies"));
    }
    if let Some(bad) = freqs.iter().find(|&&f| !(f > 0.0 && f.is_finite())) {
        return Err(Error::invalid(format!("class frequency {bad} must be positive")));
    }
    let raw: Vec<f64> = freqs.iter().map(|f| 1.0 / f.sqrt()).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(raw.iter().map(|w| w / mean).collect())
}

impl LossConfig {
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("focal gamma {} must be nonnegative", self.gamma)));
        }
        if self.kind == LossKind::Wce {
            let freqs = self
                .class_freqs
                .as_ref()
                .ok_or_else(|| Error::Config("weighted cross-entropy needs class frequencies".into()))?;
            if freqs.len() != n_classes {
                return Err(Error::Config(format!(
                    "{} class frequencies for {n_classes} classes",
                    freqs.len()
                )));
            }
            class_weights(freqs)?;
        }
        Ok(())
    }

    /// Mean loss of `logits` (`n × classes`) against `targets`.
    pub fn apply<T: Real>(&self, g: &mut Graph<T>, logits: Var, targets: &[usize]) -> Result<Var> {
        match self.kind {
            LossKind::Ce => g.cross_entropy(logits, targets, self.label_smoothing, None),
            LossKind::Wce => {
                let freqs = self
                    .class_freqs
                    .as_ref()
                    .ok_or_else(|| Error::Config("weighted cross-entropy needs class frequencies".into()))?;
                let w: Vec<T> = class_weights(freqs)?.into_iter().map(T::of).collect();
                g.cross_entropy(logits, targets, self.label_smoothing, Some(&w))
            }
            LossKind::Focal => g.focal_loss(logits, targets, self.gamma),
        }
    }
}
