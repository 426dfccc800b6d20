//! Four-stage hierarchical encoder.

use rand::Rng;

use super::config::{EmbeddingKind, ModelConfig, STAGES};
use super::layers::{Linear, LinearBnRelu, ResidualBlock};
use super::plan::Plan;
use crate::error::{Error, Result};
use crate::gmu::Gmu;
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

/// Group, modulate (optionally), expand, refine, pool.
#[derive(Clone, Debug)]
pub struct Stage {
    pub gmu: Option<Gmu>,
    pub expand: LinearBnRelu,
    pub blocks: Vec<ResidualBlock>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    /// Learned front end; `None` for the parameter-free embeddings.
    pub embed: Option<Linear>,
    pub gmu: Option<Gmu>,
    pub stages: Vec<Stage>,
}

/// Features of every level of a batch. Level 0 holds one row per input
/// point; level `s` holds one row per stage-`s` centroid. Rows of sample `b`
/// are contiguous and ordered by sample.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub levels: Vec<Var>,
    /// `batch × final width` global max-pooled descriptor.
    pub global: Var,
    /// Rows per sample at each level.
    pub counts: Vec<usize>,
}

/// Level-`s` coordinates of every plan, stacked.
pub(crate) fn stacked_coords<T: Real>(plans: &[&Plan], s: usize) -> Result<Tensor<T>> {
    let rows: usize = plans.iter().map(|p| p.level(s).len()).sum();
    let data = plans
        .iter()
        .flat_map(|p| p.level(s).iter().flatten().map(|&v| T::of(v)))
        .collect();
    Tensor::new(&[rows, 3], data)
}

/// Input point count shared by every plan of the batch.
pub(crate) fn batch_points(plans: &[&Plan]) -> Result<usize> {
    let first = plans.first().ok_or_else(|| Error::invalid("empty batch"))?.len();
    if let Some(p) = plans.iter().find(|p| p.len() != first) {
        return Err(Error::invalid(format!(
            "batch mixes clouds of {first} and {} points",
            p.len()
        )));
    }
    Ok(first)
}

impl Encoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut impl Rng, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let embed = (cfg.embedding == EmbeddingKind::Mlp).then(|| Linear::new(store, rng, "embed", 3, d, true));
        let gmu = if cfg.gmu_placement.after_embedding() {
            Some(Gmu::new(store, "embed.gmu", d, cfg.gmu_order)?)
        } else {
            None
        };
        let widths = cfg.stage_widths();
        let mut stages = Vec::with_capacity(STAGES);
        let mut prev = d;
        for s in 0..STAGES {
            let name = format!("stage{s}");
            let grouped = prev + 3;
            let gmu = if cfg.gmu_placement.after_grouping() {
                Some(Gmu::new(store, &format!("{name}.gmu"), grouped, cfg.gmu_order)?)
            } else {
                None
            };
            let expand = LinearBnRelu::new(store, rng, &format!("{name}.expand"), grouped, widths[s]);
            let blocks = (0..cfg.stage_depths[s])
                .map(|i| {
                    ResidualBlock::new(
                        store,
                        rng,
                        &format!("{name}.block{i}"),
                        widths[s],
                        cfg.bottleneck(widths[s]),
                    )
                })
                .collect();
            stages.push(Stage { gmu, expand, blocks });
            prev = widths[s];
        }
        Ok(Encoder { embed, gmu, stages })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        cfg: &ModelConfig,
        plans: &[&Plan],
    ) -> Result<Encoded> {
        let batch = plans.len();
        let n = batch_points(plans)?;
        let mut counts = vec![n];
        counts.extend(cfg.stage_points());

        let mut feats = match &self.embed {
            Some(linear) => {
                let coords = g.constant(stacked_coords(plans, 0)?);
                let y = linear.forward(g, store, coords)?;
                g.relu(y)
            }
            None => {
                let mut data = Vec::with_capacity(batch * n * cfg.embed_dim);
                for p in plans {
                    let e = p
                        .embedding()
                        .ok_or_else(|| Error::invalid("plan lacks the parameter-free embedding"))?;
                    data.extend(e.iter().map(|&v| T::of(v)));
                }
                g.constant(Tensor::new(&[batch * n, cfg.embed_dim], data)?)
            }
        };
        if let Some(gmu) = &self.gmu {
            feats = gmu.forward(g, store, feats)?;
        }

        let k = cfg.neighbors;
        let mut levels = vec![feats];
        for (s, stage) in self.stages.iter().enumerate() {
            let coords = g.constant(stacked_coords(plans, s)?);
            let joint = g.concat(&[levels[s], coords])?;
            let (mut centers, mut neighbors) = (Vec::new(), Vec::new());
            for (b, p) in plans.iter().enumerate() {
                let off = b * counts[s];
                centers.extend(p.stage(s).centers.iter().map(|&c| c + off));
                neighbors.extend(p.stage(s).neighbors.iter().map(|&c| c + off));
            }
            let mut h = match &stage.gmu {
                Some(gmu) => {
                    let grouped = g.group_relative(joint, &centers, &neighbors, k)?;
                    let grouped = gmu.forward(g, store, grouped)?;
                    stage.expand.forward(g, store, grouped)?
                }
                None => stage.expand.forward_grouped(g, store, joint, &centers, &neighbors, k)?,
            };
            for block in &stage.blocks {
                h = block.forward(g, store, h)?;
            }
            levels.push(g.max_reduce(h, 1)?);
        }

        let last = levels[STAGES];
        let width = g.value(last).cols();
        let per_sample = g.reshape(last, &[batch, counts[STAGES], width])?;
        let global = g.max_reduce(per_sample, 1)?;
        Ok(Encoded { levels, global, counts })
    }
}
