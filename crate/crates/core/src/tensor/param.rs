use super::dense::Tensor;
use super::real::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl BufferId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A learnable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Non-learnable named state (batch-norm running statistics).
#[derive(Clone, Debug)]
pub struct Buffer<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Owner of every parameter and buffer of a model.
///
/// Modules hold [`ParamId`]/[`BufferId`] handles into the store; forward
/// passes only borrow it immutably, so a frozen store can serve concurrent
/// inference.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real> {
    params: Vec<Param<T>>,
    buffers: Vec<Buffer<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufferId {
        self.buffers.push(Buffer {
            name: name.into(),
            value,
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Buffer<T> {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Buffer<T> {
        &mut self.buffers[id.0]
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<T>] {
        &mut self.buffers
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total learnable scalars. Buffers are not counted.
    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Param::zero_grad);
    }

    pub fn find_param(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Converts every tensor to another element type, dropping gradients.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param::new(p.name.clone(), p.value.cast()))
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    value: b.value.cast(),
                })
                .collect(),
        }
    }

    /// Overwrites values (params then buffers) from another store with the
    /// same names and shapes in the same order.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.params.len() != other.params.len() || self.buffers.len() != other.buffers.len() {
            return Err(Error::invalid("parameter stores have different layouts"));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::shape("copy_values_from", &dst.name));
            }
            dst.value.data_mut().copy_from_slice(src.value.data());
        }
        for (dst, src) in self.buffers.iter_mut().zip(&other.buffers) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::shape("copy_values_from", &dst.name));
            }
            dst.value.data_mut().copy_from_slice(src.value.data());
        }
        Ok(())
    }
}
