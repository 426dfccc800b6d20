//! Nonparametric adaptive point embedding.
//!
//! Each coordinate is expanded against a fixed interior grid with a Gaussian
//! and a cosine basis whose shared bandwidth grows with the cloud's spread.
//! A sigmoid gate of the same spread blends the two. Nothing is learned.

use crate::error::{Error, Result};
use crate::geom::Point;
use crate::tensor::{Real, Tensor};

/// Which basis feeds the embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Basis {
    /// Gate-blended Gaussian and cosine.
    Blended,
    /// Gate forced to 1.
    Gaussian,
    /// Gate forced to 0.
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NapeConfig {
    dim: usize,
    pub sigma0: f64,
    pub gate_sharpness: f64,
    pub gate_threshold: f64,
    pub basis: Basis,
    grid: Vec<f64>,
}

impl NapeConfig {
    /// Default constants (bandwidth 0.4, gate sharpness 10, threshold 0.1)
    /// for `dim` output channels.
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let m = dim.div_ceil(3);
        let grid = (0..m).map(|j| -1.0 + 2.0 * (j + 1) as f64 / (m + 1) as f64).collect();
        Ok(NapeConfig {
            dim,
            sigma0: 0.4,
            gate_sharpness: 10.0,
            gate_threshold: 0.1,
            basis: Basis::Blended,
            grid,
        })
    }

    pub fn with_basis(mut self, basis: Basis) -> Self {
        self.basis = basis;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Interior grid `g_j = -1 + 2(j+1)/(M+1)`, `M = ceil(dim/3)`.
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }
}

/// Mean of the three per-axis population standard deviations.
pub fn global_dispersion<T: Real>(points: &[Point<T>]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let n = points.len() as f64;
    let mut total = 0.0;
    for a in 0..3 {
        let mean = points.iter().map(|p| p[a].f64()).sum::<f64>() / n;
        let var = points.iter().map(|p| (p[a].f64() - mean).powi(2)).sum::<f64>() / n;
        total += var.sqrt();
    }
    total / 3.0
}

/// `sigma0 * (1 + dispersion)`.
pub fn adaptive_bandwidth(dispersion: f64, cfg: &NapeConfig) -> f64 {
    cfg.sigma0 * (1.0 + dispersion)
}

/// `sigmoid(sharpness * (dispersion - threshold))`.
pub fn blend_gate(dispersion: f64, cfg: &NapeConfig) -> f64 {
    1.0 / (1.0 + (-cfg.gate_sharpness * (dispersion - cfg.gate_threshold)).exp())
}

/// `N × dim` embedding. Channels run over the x grid, then y, then z; the
/// trailing `3·M − dim` channels are dropped.
pub fn nape_embed<T: Real>(points: &[Point<T>], cfg: &NapeConfig) -> Result<Tensor<T>> {
    if points.is_empty() {
        return Err(Error::invalid("cannot embed an empty cloud"));
    }
    let dispersion = global_dispersion(points);
    let sigma = adaptive_bandwidth(dispersion, cfg);
    let gate = match cfg.basis {
        Basis::Blended => blend_gate(dispersion, cfg),
        Basis::Gaussian => 1.0,
        Basis::Cosine => 0.0,
    };
    let m = cfg.grid.len();
    let d = cfg.dim;
    let two_var = 2.0 * sigma * sigma;
    let mut out = Vec::with_capacity(points.len() * d);
    for p in points {
        for ch in 0..d {
            let (axis, j) = (ch / m, ch % m);
            let diff = p[axis].f64() - cfg.grid[j];
            let rbf = (-diff * diff / two_var).exp();
            let cosv = (diff / sigma).cos();
            out.push(T::of(gate * rbf + (1.0 - gate) * cosv));
        }
    }
    Tensor::new(&[points.len(), d], out)
}
