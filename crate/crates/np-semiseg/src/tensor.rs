//! Dense row-major tensors and trainable parameters.
//!
//! Model state is always `f32`; the generic parameter exists so the same
//! kernels can be instantiated at `f64` inside test oracles (notably the
//! finite-difference gradient check).

use crate::{NpError, Result};
use num_traits::Float;

/// Scalar types the numeric kernels are instantiated at.
pub trait Real:
    Float + num_traits::FromPrimitive + num_traits::ToPrimitive + std::fmt::Debug + Default + 'static
{
    fn from_f32_exact(x: f32) -> Self;
}

impl Real for f32 {
    fn from_f32_exact(x: f32) -> Self {
        x
    }
}

impl Real for f64 {
    fn from_f32_exact(x: f32) -> Self {
        x as f64
    }
}

/// Shorthand for lifting an `f64` literal into the kernel scalar type.
pub fn real<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("finite literal")
}

/// Dense N-dimensional array, row-major, the universal value carrier.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(NpError::Shape(format!("zero extent in shape {shape:?}")));
        }
        if data.len() != numel {
            return Err(NpError::Shape(format!(
                "data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Single element of a 1-length tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(NpError::Shape(format!(
                "item() on tensor with shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Reinterpret with a new shape of equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(NpError::Shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Cast element-wise into another kernel scalar type.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs()))
    }
}

impl Tensor<f32> {
    /// Widen to f64 exactly (used by test oracles).
    pub fn widen(&self) -> Tensor<f64> {
        self.cast::<f64>()
    }
}

/// A trainable tensor plus its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub value: Tensor<f32>,
    pub grad: Tensor<f32>,
}

impl Parameter {
    pub fn new(value: Tensor<f32>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter { value, grad }
    }

    pub fn zero_grad(&mut self) {
        for g in self.grad.data_mut() {
            *g = 0.0;
        }
    }
}

/// Class id carried per pixel. 255 marks pixels excluded from losses,
/// metrics, and bank insertion.
pub const IGNORE_LABEL: u8 = 255;

/// Per-pixel class ids for one image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(NpError::Shape(format!(
                "label map {}x{} needs {} entries, got {}",
                h,
                w,
                h * w,
                data.len()
            )));
        }
        Ok(LabelMap { h, w, data })
    }

    pub fn filled(h: usize, w: usize, label: u8) -> Self {
        LabelMap {
            h,
            w,
            data: vec![label; h * w],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    /// Count of pixels not carrying the ignore label.
    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&l| l != IGNORE_LABEL).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn new_rejects_zero_extent() {
        assert!(Tensor::<f32>::new(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn widen_is_exact() {
        let t = Tensor::from_vec(vec![0.1f32, -3.5, 7.25]);
        let w = t.widen();
        for (a, b) in t.data().iter().zip(w.data()) {
            assert_eq!(*a as f64, *b);
        }
    }

    #[test]
    fn finite_check_catches_nan() {
        let t = Tensor::from_vec(vec![1.0f32, f32::NAN]);
        assert!(!t.is_all_finite());
    }

    #[test]
    fn label_map_valid_count_skips_ignore() {
        let m = LabelMap::new(2, 2, vec![0, 1, IGNORE_LABEL, 2]).unwrap();
        assert_eq!(m.valid_count(), 3);
    }
}
