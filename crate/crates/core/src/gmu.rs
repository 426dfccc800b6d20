//! Geometric modulation unit: a learnable per-channel affine map.

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

pub use crate::tensor::AffineOrder as GmuOrder;

/// Where modulation units are inserted in the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GmuPlacement {
    None,
    AfterEmbedding,
    AfterGrouping,
    Both,
}

impl GmuPlacement {
    pub fn after_embedding(self) -> bool {
        matches!(self, GmuPlacement::AfterEmbedding | GmuPlacement::Both)
    }

    pub fn after_grouping(self) -> bool {
        matches!(self, GmuPlacement::AfterGrouping | GmuPlacement::Both)
    }
}

/// `2 · width` scalars, initialized to the identity (`alpha = 1`, `beta = 0`).
#[derive(Clone, Debug)]
pub struct Gmu {
    alpha: ParamId,
    beta: ParamId,
    width: usize,
    order: GmuOrder,
}

impl Gmu {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize, order: GmuOrder) -> Result<Self> {
        if width == 0 {
            return Err(Error::Config("modulation width must be positive".into()));
        }
        Ok(Gmu {
            alpha: store.add_param(format!("{name}.alpha"), Tensor::ones(&[width])),
            beta: store.add_param(format!("{name}.beta"), Tensor::zeros(&[width])),
            width,
            order,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn order(&self) -> GmuOrder {
        self.order
    }

    pub fn alpha(&self) -> ParamId {
        self.alpha
    }

    pub fn beta(&self) -> ParamId {
        self.beta
    }

    pub fn num_params(&self) -> usize {
        2 * self.width
    }

    /// Modulates the last axis of `x`, which must have `width` channels.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let c = g.value(x).cols();
        if c != self.width {
            return Err(Error::shape(
                "gmu",
                format!("input has {c} channels, unit has {}", self.width),
            ));
        }
        let a = g.param(store, self.alpha);
        let b = g.param(store, self.beta);
        g.channel_affine(x, a, b, self.order)
    }
}
