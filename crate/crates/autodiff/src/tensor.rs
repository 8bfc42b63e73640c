use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, TensorError};
use crate::float::Float;

/// Dense row-major array.
///
/// Scalars are represented with dims `[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(TensorError::shape("tensor", format!("zero-sized dim in {dims:?}")));
        }
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(TensorError::shape("tensor", format!("dims {dims:?} need {numel} elements, got {}", data.len())));
        }
        Ok(Tensor { dims, data })
    }

    pub fn from_f64(dims: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(dims, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn full(dims: Vec<usize>, value: T) -> Self {
        let numel = dims.iter().product();
        Tensor { dims, data: vec![value; numel] }
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: Vec<usize>) -> Self {
        Self::full(dims, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor { dims: vec![1], data: vec![value] }
    }

    /// Gaussian entries with mean 0. Samples are drawn in f64 and rounded, so a given
    /// rng state yields the same values at either precision up to that rounding.
    pub fn randn<R: Rng + ?Sized>(dims: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let numel: usize = dims.iter().product();
        let data = if std == 0.0 {
            vec![T::zero(); numel]
        } else {
            let normal = Normal::new(0.0, std).expect("finite std");
            (0..numel).map(|_| T::from_f64(normal.sample(rng))).collect()
        };
        Tensor { dims, data }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Size of the trailing axis.
    pub fn last_dim(&self) -> usize {
        *self.dims.last().expect("tensors have rank >= 1")
    }

    /// Number of rows when viewed as `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn row(&self, r: usize) -> &[T] {
        let n = self.last_dim();
        &self.data[r * n..(r + 1) * n]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, dims: Vec<usize>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != self.numel() {
            return Err(TensorError::shape("reshape", format!("{:?} -> {:?}", self.dims, dims)));
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor { dims: self.dims.clone(), data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect() }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).fold(0.0, f64::max)
    }

    /// Row-wise argmax over the trailing axis; ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows()).map(|r| argmax(self.row(r))).collect()
    }
}

pub fn argmax<T: Float>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest entries, ties broken toward the higher index.
/// Returned in descending score order.
pub fn top_k_indices<T: Float>(scores: &[T], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(b.cmp(&a)));
    order.truncate(k);
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_data() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn top_k_prefers_deeper_on_ties() {
        assert_eq!(top_k_indices(&[1.0f64, 1.0, 0.0], 1), vec![1]);
        let mut all = top_k_indices(&[0.5f64, 0.5, 0.5], 2);
        all.sort();
        assert_eq!(all, vec![1, 2]);
        assert_eq!(top_k_indices(&[0.1f64, 3.0, 2.0, -1.0], 2), vec![1, 2]);
    }
}
