use std::fmt;
use std::mem;

use super::alloc::{track_alloc, track_free};
use super::real::Real;
use crate::error::{Error, Result};

/// Dense row-major array. The last axis is the channel axis for every
/// row-wise operation.
pub struct Tensor<T: Real> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        track_alloc(data.len() * mem::size_of::<T>());
        Tensor { shape, data }
    }

    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {want} elements, got {}", data.len()),
            ));
        }
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis (1 for a rank-0 shape).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[len / cols, cols]`.
    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.cols()).unwrap_or(0)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn byte_len(&self) -> usize {
        self.data.len() * mem::size_of::<T>()
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn into_vec(mut self) -> Vec<T> {
        let data = mem::take(&mut self.data);
        track_free(data.len() * mem::size_of::<T>());
        data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let want: usize = shape.iter().product();
        if want != self.data.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|x| U::of(x.f64())).collect())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add_assign",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Multi-index element access.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {i} out of range {d}");
            flat = flat * d + i;
        }
        self.data[flat]
    }
}

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self::from_parts(self.shape.clone(), self.data.clone())
    }
}

impl<T: Real> Drop for Tensor<T> {
    fn drop(&mut self) {
        track_free(self.data.len() * mem::size_of::<T>());
    }
}

impl<T: Real> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor<{}>{:?} [", T::NAME, self.shape)?;
        for (i, x) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{x}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}
