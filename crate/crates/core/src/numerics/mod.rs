//! Dense tensors, a reverse-mode tape, the parameter store and a
//! finite-difference gradient oracle.
//!
//! Everything is generic over [`Real`] so the same model code runs in
//! 32-bit for training and 64-bit for gradient verification.

mod gradcheck;
pub mod init;
mod store;
mod tape;

pub use gradcheck::{grad_check, sample_coordinates, Coordinate};
pub use store::{Gradients, ParameterStore};
pub use tape::{Tape, Var};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Element type of every tensor.
pub trait Real: Float + Default + Debug + Display + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + 'static {
    /// Checkpoint dtype code.
    const DTYPE: DType;

    fn lit(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;
    fn lit(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;
    fn lit(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Row-major dense tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    /// Panics if `data.len()` does not match the shape.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor data length does not match shape {shape:?}");
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Self {
        Self::from_vec(shape, data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Product of all extents but the last.
    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.cols()).unwrap_or(0)
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| U::lit(x.to_f64())).collect() }
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(&a, &b)| (a - b).abs().to_f64()).fold(0.0, f64::max)
    }
}

/// Row-wise softmax under an additive mask of `0` / `-inf` entries.
///
/// A row whose entries are all masked comes back as all zeros.
pub fn masked_softmax<T: Real>(scores: &Tensor<T>, additive_mask: &Tensor<T>) -> Tensor<T> {
    assert_eq!(scores.shape(), additive_mask.shape());
    let allowed: Vec<bool> = additive_mask.data().iter().map(|m| m.is_finite()).collect();
    let mut out = Tensor::zeros(scores.shape());
    let c = scores.cols();
    for r in 0..scores.rows() {
        let mask_row = &allowed[r * c..(r + 1) * c];
        let mut row: Vec<T> =
            scores.row(r).iter().zip(additive_mask.row(r)).map(|(&s, &m)| if m.is_finite() { s + m } else { s }).collect();
        softmax_row_in_place(&mut row, mask_row);
        out.row_mut(r).copy_from_slice(&row);
    }
    out
}

pub(crate) fn softmax_row_in_place<T: Real>(row: &mut [T], allowed: &[bool]) {
    let mut max = T::neg_infinity();
    for (&x, &ok) in row.iter().zip(allowed) {
        if ok && x > max {
            max = x;
        }
    }
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|x| *x = T::zero());
        return;
    }
    let mut sum = T::zero();
    for (x, &ok) in row.iter_mut().zip(allowed) {
        if ok {
            *x = (*x - max).exp();
            sum += *x;
        } else {
            *x = T::zero();
        }
    }
    for (x, &ok) in row.iter_mut().zip(allowed) {
        if ok {
            *x = *x / sum;
        }
    }
}

/// Norms below this are treated as zero by [`cosine_similarity`].
pub const COSINE_ZERO_NORM: f64 = 1e-12;

pub fn cosine_similarity<T: Real>(a: &[T], b: &[T]) -> T {
    assert_eq!(a.len(), b.len());
    let na = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    if na.to_f64() < COSINE_ZERO_NORM || nb.to_f64() < COSINE_ZERO_NORM {
        return T::zero();
    }
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let c = dot / (na * nb);
    c.max(-T::one()).min(T::one())
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn open(n: usize) -> Tensor<f64> {
        Tensor::zeros(&[1, n])
    }

    #[test]
    fn uniform_scores_give_uniform_weights() {
        let s = Tensor::<f64>::filled(&[1, 4], 3.0);
        let p = masked_softmax(&s, &open(4));
        for &w in p.data() {
            assert!((w - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn single_open_entry_takes_all_weight() {
        let s = Tensor::<f64>::from_f64(&[1, 3], &[0.3, -2.0, 5.0]);
        let m = Tensor::<f64>::from_f64(&[1, 3], &[f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY]);
        assert_eq!(masked_softmax(&s, &m).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn fully_masked_row_is_zero() {
        let s = Tensor::<f32>::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let m = Tensor::<f32>::from_f64(&[2, 2], &[f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0, 0.0]);
        let p = masked_softmax(&s, &m);
        assert_eq!(p.row(0), &[0.0, 0.0]);
        assert!((p.row(1).iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cosine_cases() {
        let a = [1.0f64, 2.0, -0.5];
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((cosine_similarity(&a, &a) - 1.0).abs() < 1e-15);
        assert!((cosine_similarity(&a, &neg) + 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0f64, 0.0], &[0.0, 3.0]), 0.0);
        assert_eq!(cosine_similarity(&[0.0f64, 0.0], &[1.0, 3.0]), 0.0);
        let scaled: Vec<f64> = a.iter().map(|x| x * 7.5).collect();
        assert!((cosine_similarity(&a, &scaled) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert!((sigmoid(800.0f64) - 1.0).abs() < 1e-15);
    }
}
