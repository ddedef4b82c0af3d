//! Dense arrays, a reverse-mode tape and the Adam optimiser.
//!
//! Everything is generic over [`Real`] so the same model code runs in `f32`
//! for speed and in `f64` when gradients are checked against finite
//! differences.

mod adam;
mod checkpoint;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{Array2, ArrayView2, ArrayViewMut2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Result, SlamError};

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use tape::{CustomOp, Tape, Var};

/// Floating point type the numeric code is generic over.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// A dense, row-major array of any rank.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(SlamError::contract(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); numel],
            requires_grad: false,
        }
    }

    pub fn from_array2(a: Array2<T>) -> Self {
        let shape = vec![a.nrows(), a.ncols()];
        let data = if a.is_standard_layout() {
            a.into_raw_vec_and_offset().0
        } else {
            a.iter().copied().collect()
        };
        Tensor {
            shape,
            data,
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Rows are the leading dimension, columns everything after it.
    fn matrix_dims(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => (self.shape[0], self.shape[1..].iter().product()),
        }
    }

    /// Views the tensor as a matrix, flattening trailing dimensions.
    pub fn matrix(&self) -> ArrayView2<'_, T> {
        let dims = self.matrix_dims();
        ArrayView2::from_shape(dims, &self.data).expect("shape checked at construction")
    }

    pub fn matrix_mut(&mut self) -> ArrayViewMut2<'_, T> {
        let dims = self.matrix_dims();
        ArrayViewMut2::from_shape(dims, &mut self.data).expect("shape checked at construction")
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
        }
    }
}

/// Identifies one tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named trainable tensors together with their accumulated gradients.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    grads: Vec<Vec<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let n = value.numel();
        self.names.push(name.into());
        self.values.push(value.with_grad(true));
        self.grads.push(vec![T::zero(); n]);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &[T] {
        &self.grads[id.0]
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: ArrayView2<'_, T>) -> Result<()> {
        let slot = &mut self.grads[id.0];
        if grad.len() != slot.len() {
            return Err(SlamError::contract(format!(
                "gradient for '{}' has {} values, parameter has {}",
                self.names[id.0],
                grad.len(),
                slot.len()
            )));
        }
        for (g, v) in slot.iter_mut().zip(grad.iter()) {
            *g = *g + *v;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.is_finite())
    }

    pub fn num_values(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// (name, tensor) pairs in insertion order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Splits into mutable values and shared gradients for the optimiser.
    pub(crate) fn values_and_grads(&mut self) -> (&mut [Tensor<T>], &[Vec<T>]) {
        (&mut self.values, &self.grads)
    }

    /// FNV-1a over the bit patterns of every value; any change to any
    /// parameter changes the checksum.
    pub fn checksum(&self) -> u64 {
        self.checksum_where(|_| true)
    }

    /// Checksum over the tensors whose names satisfy `keep`.
    pub fn checksum_where(&self, keep: impl Fn(&str) -> bool) -> u64 {
        let mut h = Fnv::new();
        for (name, t) in self.named().filter(|(n, _)| keep(n)) {
            h.write(name.as_bytes());
            for v in t.data() {
                h.write(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h.finish()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            grads: self.values.iter().map(|t| vec![U::zero(); t.numel()]).collect(),
        }
    }
}

pub(crate) struct Fnv(u64);

impl Fnv {
    pub(crate) fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::new(vec![2, 3, 4], vec![0.0; 24]).unwrap();
        assert_eq!(t.matrix().dim(), (2, 12));
    }

    #[test]
    fn checksum_tracks_every_value() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::zeros(vec![4, 4]));
        let before = store.checksum();
        store.get_mut(id).data_mut()[15] = 1e-7;
        assert_ne!(before, store.checksum());
    }
}
