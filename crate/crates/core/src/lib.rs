//! SLNet point-cloud backbone: autodiff tensors, geometry kernels, the
//! non-parametric embedding, the encoder and heads, training utilities and
//! deployability scoring.

pub mod backbone;
pub mod error;
pub mod geom;
pub mod gmu;
pub mod nape;
pub mod netscore;
pub mod tensor;
pub mod train;

pub use backbone::{Model, ModelConfig, Plan};
pub use error::{Error, Result};
pub use geom::{Point, PointCloud};
pub use tensor::{AllocStats, Graph, Mode, Param, ParamId, ParamStore, Real, Tensor, Var};
