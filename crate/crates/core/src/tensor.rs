//! Dense row-major tensors. [`Tensor`] is the `f32` tensor used everywhere
//! outside of precision checks.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::RngStream;

#[derive(Clone, Debug, PartialEq)]
pub struct Array<R> {
    shape: Vec<usize>,
    data: Vec<R>,
}

pub type Tensor = Array<f32>;

impl<R: Real> Array<R> {
    pub fn new(shape: &[usize], data: Vec<R>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Argument(format!("shape {shape:?} has a zero dimension")));
        }
        if numel != data.len() {
            return Err(Error::Argument(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a tensor whose shape is already known to match `data`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<R>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, R::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, R::one())
    }

    pub fn full(shape: &[usize], value: R) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; numel])
    }

    pub fn scalar(value: R) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    /// Elementwise conversion to another scalar type.
    pub fn cast<S: Real>(&self) -> Array<S> {
        Array::from_parts(self.shape.clone(), self.data.iter().map(|v| S::of_f64(v.as_f64())).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    /// First element; intended for single-value tensors such as losses.
    pub fn item(&self) -> R {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(R) -> R) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> R {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(R::zero(), R::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum::<f64>() / self.data.len() as f64
    }

    /// Sub-tensor along the leading axis, e.g. one sample of a batch.
    pub fn index_outer(&self, i: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        let shape = if self.shape.len() == 1 {
            vec![1]
        } else {
            self.shape[1..].to_vec()
        };
        Self::from_parts(shape, self.data[i * inner..(i + 1) * inner].to_vec())
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Argument("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::Argument(format!(
                    "stack shape mismatch: {:?} vs {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self::from_parts(shape, data))
    }
}

impl Tensor {
    /// Standard normal entries scaled by `std`.
    pub fn randn(shape: &[usize], std: f32, rng: &mut RngStream) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.normal() as f32 * std).collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut RngStream) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| rng.uniform(lo as f64, hi as f64) as f32)
            .collect();
        Self::from_parts(shape.to_vec(), data)
    }

    /// FNV-1a over the raw bit patterns; equal checksums mean bit-identical data
    /// with overwhelming probability.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for d in &self.shape {
            h = fnv_step(h, &(*d as u64).to_le_bytes());
        }
        for v in &self.data {
            h = fnv_step(h, &v.to_bits().to_le_bytes());
        }
        h
    }
}

fn fnv_step(mut h: u64, bytes: &[u8]) -> u64 {
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_length() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[0, 3], vec![]).is_err());
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn stack_and_index_are_inverse() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert_eq!(s.index_outer(0), a);
        assert_eq!(s.index_outer(1), b);
    }

    #[test]
    fn checksum_sees_single_bit_flip() {
        let a = Tensor::zeros(&[4]);
        let mut b = a.clone();
        b.data_mut()[3] = -0.0;
        assert_ne!(a.checksum(), b.checksum());
    }
}
