//! SGD with momentum, the cosine schedule and weight averaging.

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr0: f64,
    /// Floor the cosine schedule decays to.
    pub lr_min: f64,
    pub epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Decay of the weight average; `None` disables it.
    pub ema_rho: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr0: 0.1,
            lr_min: 0.0,
            epochs: 300,
            momentum: 0.9,
            weight_decay: 1e-4,
            ema_rho: Some(0.999),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 {} must be positive", self.lr0)));
        }
        if !(0.0..=self.lr0).contains(&self.lr_min) {
            return Err(Error::Config(format!("lr_min {} outside [0, lr0]", self.lr_min)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay {} is negative", self.weight_decay)));
        }
        if let Some(rho) = self.ema_rho {
            if !(0.0..=1.0).contains(&rho) {
                return Err(Error::Config(format!("ema_rho {rho} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// `lr_min + (lr0 - lr_min) · (1 + cos(π · epoch / epochs)) / 2`, holding
/// the floor past the last epoch.
pub fn cosine_lr(epoch: usize, cfg: &OptimConfig) -> f64 {
    let t = epoch.min(cfg.epochs) as f64 / cfg.epochs as f64;
    cfg.lr_min + (cfg.lr0 - cfg.lr_min) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Momentum SGD with coupled weight decay:
/// `v ← μ·v + g + λ·p`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd<T: Real> {
    velocity: Vec<Tensor<T>>,
    momentum: T,
    weight_decay: T,
}

impl<T: Real> Sgd<T> {
    pub fn new(store: &ParamStore<T>, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            velocity: store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            momentum: T::of(momentum),
            weight_decay: T::of(weight_decay),
        }
    }

    /// Applies the accumulated gradients of `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if store.params().len() != self.velocity.len() {
            return Err(Error::invalid("optimizer built for a different parameter set"));
        }
        let lr = T::of(lr);
        for (p, v) in store.params_mut().iter_mut().zip(&mut self.velocity) {
            if p.value.shape() != v.shape() {
                return Err(Error::shape("sgd_step", format!("{} changed shape", p.name)));
            }
            let vals = p.value.data_mut();
            for ((w, vel), &g) in vals.iter_mut().zip(v.data_mut()).zip(p.grad.data()) {
                *vel = self.momentum * *vel + g + self.weight_decay * *w;
                *w = *w - lr * *vel;
            }
        }
        Ok(())
    }
}

/// `shadow ← rho·shadow + (1 − rho)·params`, entrywise.
pub fn ema_update<T: Real>(shadow: &mut [T], params: &[T], rho: f64) -> Result<()> {
    if shadow.len() != params.len() {
        return Err(Error::shape(
            "ema_update",
            format!("{} shadow entries for {} parameters", shadow.len(), params.len()),
        ));
    }
    let (rho, keep) = (T::of(rho), T::of(1.0 - rho));
    for (s, &p) in shadow.iter_mut().zip(params) {
        *s = rho * *s + keep * p;
    }
    Ok(())
}

/// Exponential moving average of every parameter and statistics buffer.
///
/// Step `t` (from 0) uses decay `min(rho, (1 + t) / (10 + t))` so the
/// average is not dominated by the initialization on short runs.
#[derive(Clone, Debug)]
pub struct Ema<T: Real> {
    shadow: ParamStore<T>,
    rho: f64,
    steps: u64,
}

impl<T: Real> Ema<T> {
    pub fn new(store: &ParamStore<T>, rho: f64) -> Self {
        Ema {
            shadow: store.clone(),
            rho,
            steps: 0,
        }
    }

    /// Decay applied by the next [`Ema::update`].
    pub fn decay(&self) -> f64 {
        let t = self.steps as f64;
        self.rho.min((1.0 + t) / (10.0 + t))
    }

    pub fn update(&mut self, store: &ParamStore<T>) -> Result<()> {
        let rho = self.decay();
        if store.params().len() != self.shadow.params().len() || store.buffers().len() != self.shadow.buffers().len() {
            return Err(Error::invalid("average built for a different parameter set"));
        }
        for (s, p) in self.shadow.params_mut().iter_mut().zip(store.params()) {
            ema_update(s.value.data_mut(), p.value.data(), rho)?;
        }
        for (s, b) in self.shadow.buffers_mut().iter_mut().zip(store.buffers()) {
            ema_update(s.value.data_mut(), b.value.data(), rho)?;
        }
        self.steps += 1;
        Ok(())
    }

    pub fn shadow(&self) -> &ParamStore<T> {
        &self.shadow
    }

    pub fn into_shadow(self) -> ParamStore<T> {
        self.shadow
    }
}
