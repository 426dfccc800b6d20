//! Parameterized building blocks shared by the encoder and heads.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{BnConfig, BnStats, Graph, ParamId, ParamStore, Real, Tensor, Var};

/// Affine map over the last axis, initialized uniformly in
/// `±1/sqrt(fan_in)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut init = |shape: &[usize]| Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)));
        let weight = store.add_param(format!("{name}.weight"), init(&[fan_in, fan_out]));
        let bias = bias.then(|| store.add_param(format!("{name}.bias"), init(&[fan_out])));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

/// Batch normalization over every axis but the last.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: BnStats,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        BatchNorm {
            gamma: store.add_param(format!("{name}.gamma"), Tensor::ones(&[width])),
            beta: store.add_param(format!("{name}.beta"), Tensor::zeros(&[width])),
            stats: BnStats {
                mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[width])),
                var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[width])),
            },
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.batch_norm(x, gamma, beta, store, self.stats, BnConfig::default())
    }
}

/// Shared linear map, batch norm, ReLU.
#[derive(Clone, Debug)]
pub struct LinearBnRelu {
    pub linear: Linear,
    pub bn: BatchNorm,
}

impl LinearBnRelu {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        LinearBnRelu {
            linear: Linear::new(store, rng, &format!("{name}.linear"), fan_in, fan_out, true),
            bn: BatchNorm::new(store, &format!("{name}.bn"), fan_out),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.linear.forward(g, store, x)?;
        let y = self.bn.forward(g, store, y)?;
        Ok(g.relu(y))
    }

    /// Same as `forward(group_relative(x, centers, neighbors, k))`, computed
    /// by projecting the rows of `x` before grouping: the linear map commutes
    /// with the neighbor-minus-center difference.
    pub fn forward_grouped<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        centers: &[usize],
        neighbors: &[usize],
        k: usize,
    ) -> Result<Var> {
        let w = g.param(store, self.linear.weight);
        let y = g.linear(x, w, None)?;
        let mut y = g.group_relative(y, centers, neighbors, k)?;
        if let Some(b) = self.linear.bias {
            let b = g.param(store, b);
            y = g.add_bias(y, b)?;
        }
        let y = self.bn.forward(g, store, y)?;
        Ok(g.relu(y))
    }
}

/// Residual bottleneck `relu(x + up(relu(bn(down(x)))))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub down: Linear,
    pub bn: BatchNorm,
    pub up: Linear,
}

impl ResidualBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        width: usize,
        bottleneck: usize,
    ) -> Self {
        ResidualBlock {
            down: Linear::new(store, rng, &format!("{name}.down"), width, bottleneck, true),
            bn: BatchNorm::new(store, &format!("{name}.bn"), bottleneck),
            up: Linear::new(store, rng, &format!("{name}.up"), bottleneck, width, true),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.down.forward(g, store, x)?;
        let h = self.bn.forward(g, store, h)?;
        let h = g.relu(h);
        let h = self.up.forward(g, store, h)?;
        let y = g.add(x, h)?;
        Ok(g.relu(y))
    }
}
