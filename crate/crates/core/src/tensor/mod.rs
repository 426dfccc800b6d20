//! Dense tensors, parameters and reverse-mode differentiation.

mod alloc;
mod dense;
pub mod gradcheck;
mod graph;
mod param;
mod real;

pub use alloc::AllocStats;
pub use dense::Tensor;
pub use graph::{AffineOrder, BnConfig, BnStats, BnUpdate, Graph, Mode, Var};
pub use param::{Buffer, BufferId, Param, ParamId, ParamStore};
pub use real::Real;
