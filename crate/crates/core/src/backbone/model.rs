//! A complete network: architecture, weights and the forward entry points.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{HeadKind, ModelConfig};
use super::encoder::{Encoded, Encoder};
use super::heads::{ClassifierHead, SegmentationHead};
use super::plan::Plan;
use crate::error::{Error, Result};
use crate::geom::Point;
use crate::tensor::{Graph, Mode, ParamStore, Real, Tensor, Var};

#[derive(Clone, Debug)]
pub enum Head {
    Classify(ClassifierHead),
    Segment(SegmentationHead),
}

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    cfg: ModelConfig,
    encoder: Encoder,
    head: Head,
    store: ParamStore<T>,
}

impl<T: Real> Model<T> {
    /// Freshly initialized model; `seed` drives weight initialization.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &mut rng, &cfg)?;
        let head = match cfg.head {
            HeadKind::Classify => Head::Classify(ClassifierHead::new(&mut store, &mut rng, &cfg)),
            HeadKind::PartSegment => Head::Segment(SegmentationHead::new(&mut store, &mut rng, &cfg)),
        };
        Ok(Model {
            cfg,
            encoder,
            head,
            store,
        })
    }

    /// Model for `cfg` carrying the weights of `store`, whose names and
    /// shapes must match the architecture.
    pub fn with_store(cfg: ModelConfig, store: &ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
        model.store.copy_values_from(store)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Learnable scalars, batch-norm affine terms included and running
    /// statistics excluded.
    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    /// Same architecture and weights in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            encoder: self.encoder.clone(),
            head: self.head.clone(),
            store: self.store.cast(),
        }
    }

    pub fn plan(&self, points: &[Point<f32>], seed: u64) -> Result<Plan> {
        Plan::build(points, &self.cfg, seed)
    }

    /// Encoder features of a batch, reading weights from `store`.
    pub fn encode_with(&self, g: &mut Graph<T>, store: &ParamStore<T>, plans: &[&Plan]) -> Result<Encoded> {
        self.encoder.forward(g, store, &self.cfg, plans)
    }

    /// Logits of a batch, reading weights from `store` (which must share
    /// this model's layout). Classification yields `batch × classes`;
    /// segmentation yields `(batch · points) × parts` and needs one category
    /// per sample.
    pub fn forward_with(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        plans: &[&Plan],
        categories: Option<&[usize]>,
    ) -> Result<Var> {
        let enc = self.encode_with(g, store, plans)?;
        match &self.head {
            Head::Classify(h) => h.forward(g, store, enc.global),
            Head::Segment(h) => {
                let cats = categories.ok_or_else(|| Error::invalid("segmentation needs a category per sample"))?;
                h.forward(g, store, plans, &enc, cats)
            }
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, plans: &[&Plan], categories: Option<&[usize]>) -> Result<Var> {
        self.forward_with(g, &self.store, plans, categories)
    }

    /// Eval-mode logits. Leaves every weight and statistic untouched.
    pub fn predict(&self, plans: &[&Plan], categories: Option<&[usize]>) -> Result<Tensor<T>> {
        let mut g = Graph::new(Mode::Eval, 0);
        let out = self.forward(&mut g, plans, categories)?;
        let value = g.value(out).clone();
        Ok(value)
    }
}
