//! Classification and part-segmentation heads.

use rand::Rng;

use super::config::{ModelConfig, STAGES};
use super::encoder::Encoded;
use super::layers::{Linear, LinearBnRelu};
use super::plan::Plan;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

/// Two-layer perceptron on the global descriptor.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub hidden: Linear,
    pub out: Linear,
    pub dropout: f64,
}

impl ClassifierHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        let w = cfg.stage_widths()[STAGES - 1];
        let hidden = cfg.classifier_hidden_width();
        ClassifierHead {
            hidden: Linear::new(store, rng, "head.hidden", w, hidden, true),
            out: Linear::new(store, rng, "head.out", hidden, cfg.n_classes, true),
            dropout: cfg.dropout,
        }
    }

    /// `batch × n_classes` logits.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, global: Var) -> Result<Var> {
        let h = self.hidden.forward(g, store, global)?;
        let h = g.relu(h);
        let h = g.dropout(h, self.dropout)?;
        self.out.forward(g, store, h)
    }
}

/// Interpolating decoder with multi-level pooled context and a category
/// embedding.
#[derive(Clone, Debug)]
pub struct SegmentationHead {
    /// Coarsest step first.
    pub upsample: Vec<LinearBnRelu>,
    pub category_embed: Linear,
    pub fuse: LinearBnRelu,
    pub out: Linear,
    pub categories: usize,
    pub dropout: f64,
}

impl SegmentationHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        let mut level_widths = vec![cfg.embed_dim];
        level_widths.extend(cfg.stage_widths());
        let dec = cfg.decoder_widths();
        let mut upsample = Vec::with_capacity(STAGES);
        let mut cur = level_widths[STAGES];
        for (i, &out) in dec.iter().enumerate() {
            let skip = level_widths[STAGES - i - 1];
            upsample.push(LinearBnRelu::new(
                store,
                rng,
                &format!("decoder.up{i}"),
                cur + skip,
                out,
            ));
            cur = out;
        }
        let context: usize = level_widths.iter().sum::<usize>() + cfg.class_embed_dim;
        SegmentationHead {
            upsample,
            category_embed: Linear::new(
                store,
                rng,
                "decoder.category",
                cfg.seg_categories,
                cfg.class_embed_dim,
                true,
            ),
            fuse: LinearBnRelu::new(store, rng, "decoder.fuse", cur + context, cfg.seg_hidden),
            out: Linear::new(store, rng, "decoder.out", cfg.seg_hidden, cfg.n_classes, true),
            categories: cfg.seg_categories,
            dropout: cfg.dropout,
        }
    }

    /// `(batch · points) × parts` logits.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        plans: &[&Plan],
        enc: &Encoded,
        categories: &[usize],
    ) -> Result<Var> {
        let batch = plans.len();
        if categories.len() != batch {
            return Err(Error::invalid(format!(
                "{} category labels for a batch of {batch}",
                categories.len()
            )));
        }
        if let Some(&bad) = categories.iter().find(|&&c| c >= self.categories) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: self.categories,
            });
        }
        let counts = &enc.counts;
        let mut cur = enc.levels[STAGES];
        for (i, unit) in self.upsample.iter().enumerate() {
            let coarse = STAGES - i;
            let (mut idx, mut weights) = (Vec::new(), Vec::new());
            let mut k = 0;
            for (b, p) in plans.iter().enumerate() {
                let w = p
                    .upsample(i)
                    .ok_or_else(|| Error::invalid("plan lacks decoder interpolation"))?;
                k = w.k;
                idx.extend(w.indices.iter().map(|&j| j + b * counts[coarse]));
                weights.extend(w.weights.iter().map(|&v| T::of(v)));
            }
            let interp = g.weighted_gather(cur, &idx, &weights, k)?;
            let joint = g.concat(&[interp, enc.levels[coarse - 1]])?;
            cur = unit.forward(g, store, joint)?;
        }

        let mut context = Vec::with_capacity(STAGES + 2);
        for (l, &level) in enc.levels.iter().enumerate() {
            let c = g.value(level).cols();
            let per_sample = g.reshape(level, &[batch, counts[l], c])?;
            context.push(g.max_reduce(per_sample, 1)?);
        }
        let mut onehot = Tensor::zeros(&[batch, self.categories]);
        for (b, &c) in categories.iter().enumerate() {
            onehot.data_mut()[b * self.categories + c] = T::one();
        }
        let onehot = g.constant(onehot);
        context.push(self.category_embed.forward(g, store, onehot)?);
        let context = g.concat(&context)?;
        let context = g.repeat_rows(context, counts[0])?;
        let joint = g.concat(&[cur, context])?;
        let h = self.fuse.forward(g, store, joint)?;
        let h = g.dropout(h, self.dropout)?;
        self.out.forward(g, store, h)
    }
}
