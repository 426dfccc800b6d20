//! Per-cloud geometry that does not depend on learned weights.
//!
//! Sampling, neighbor search, the parameter-free embedding and the
//! interpolation weights of the decoder are all functions of coordinates
//! only. A [`Plan`] computes them once so training can reuse them across
//! epochs.

use super::config::{EmbeddingKind, HeadKind, ModelConfig, Sampling, STAGES};
use crate::error::{Error, Result};
use crate::geom::{fps, idw_weights, neighborhoods, random_sample, IdwWeights, Point};
use crate::nape::{nape_embed, Basis, NapeConfig};

/// Neighbors of one interpolated decoder step.
pub const IDW_NEIGHBORS: usize = 3;
pub const IDW_POWER: f64 = 2.0;
pub const IDW_EPS: f64 = 1e-8;

/// Sampling and grouping of one stage, indexing the previous level.
#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    pub centers: Vec<usize>,
    pub neighbors: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    levels: Vec<Vec<Point<f64>>>,
    embedding: Option<Vec<f64>>,
    stages: Vec<StagePlan>,
    upsample: Vec<IdwWeights<f64>>,
}

fn normalize(points: &[Point<f64>]) -> Vec<Point<f64>> {
    let n = points.len() as f64;
    let c: Point<f64> = std::array::from_fn(|a| points.iter().map(|p| p[a]).sum::<f64>() / n);
    let centered: Vec<Point<f64>> = points.iter().map(|p| std::array::from_fn(|a| p[a] - c[a])).collect();
    let radius = centered
        .iter()
        .map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    if radius > 0.0 {
        centered.iter().map(|p| p.map(|v| v / radius)).collect()
    } else {
        centered
    }
}

impl Plan {
    /// Geometry for one cloud. `seed` drives random sampling only.
    pub fn build(points: &[Point<f32>], cfg: &ModelConfig, seed: u64) -> Result<Plan> {
        let counts = cfg.stage_points();
        if points.len() < counts[0] {
            return Err(Error::invalid(format!(
                "cloud has {} points, the first stage samples {}",
                points.len(),
                counts[0]
            )));
        }
        let raw: Vec<Point<f64>> = points.iter().map(|p| p.map(f64::from)).collect();
        if raw.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input coordinates".into()));
        }
        let base = if cfg.normalize { normalize(&raw) } else { raw };
        let embedding = match cfg.embedding {
            EmbeddingKind::Mlp => None,
            kind => {
                let basis = match kind {
                    EmbeddingKind::Gaussian => Basis::Gaussian,
                    EmbeddingKind::Cosine => Basis::Cosine,
                    _ => Basis::Blended,
                };
                let nape = NapeConfig::new(cfg.embed_dim)?.with_basis(basis);
                Some(nape_embed::<f64>(&base, &nape)?.into_vec())
            }
        };
        let mut levels = vec![base];
        let mut stages = Vec::with_capacity(STAGES);
        for (s, &m) in counts.iter().enumerate() {
            let prev = &levels[s];
            let centers = match cfg.sampling {
                Sampling::Fps => fps(prev, m)?,
                Sampling::Random => random_sample(prev.len(), m, seed.wrapping_mul(31).wrapping_add(s as u64))?,
            };
            let nbr = neighborhoods(prev, &centers, cfg.neighbors)?;
            let next = centers.iter().map(|&c| prev[c]).collect();
            stages.push(StagePlan {
                centers,
                neighbors: nbr.neighbors,
            });
            levels.push(next);
        }
        let upsample = if cfg.head == HeadKind::PartSegment {
            (1..=STAGES)
                .rev()
                .map(|s| idw_weights(&levels[s], &levels[s - 1], IDW_NEIGHBORS, IDW_POWER, IDW_EPS))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(Plan {
            levels,
            embedding,
            stages,
            upsample,
        })
    }

    /// Number of input points.
    pub fn len(&self) -> usize {
        self.levels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels[0].is_empty()
    }

    /// Coordinates of level `s`: the (normalized) input for 0, stage
    /// centroids after.
    pub fn level(&self, s: usize) -> &[Point<f64>] {
        &self.levels[s]
    }

    /// Parameter-free embedding, `len() × embed_dim`, when configured.
    pub fn embedding(&self) -> Option<&[f64]> {
        self.embedding.as_deref()
    }

    pub fn stage(&self, s: usize) -> &StagePlan {
        &self.stages[s]
    }

    /// Interpolation from level `STAGES - i` onto level `STAGES - i - 1`.
    pub fn upsample(&self, i: usize) -> Option<&IdwWeights<f64>> {
        self.upsample.get(i)
    }
}
