//! Dense row-major `f64` tensors.
//!
//! Everything in this crate runs in 64-bit floats; desk-scale problem sizes
//! make that affordable and it tightens every oracle tolerance.

use rand::Rng;
use rand_distr::StandardNormal;

/// An n-dimensional array of `f64` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor from a shape and matching flat data.
    ///
    /// Panics if `product(shape) != data.len()`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor shape {:?} implies {} elements, got {}",
            shape,
            numel,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-D tensor from nested rows. Panics on ragged input.
    pub fn matrix(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged matrix rows");
            data.extend_from_slice(row);
        }
        Tensor {
            shape: vec![r, c],
            data,
        }
    }

    /// Gaussian-initialised tensor with the given standard deviation.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// The D×D identity matrix.
    pub fn eye(d: usize) -> Self {
        let mut t = Tensor::zeros(&[d, d]);
        for i in 0..d {
            t.data[i * d + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar (or single-element) tensor.
    pub fn item(&self) -> f64 {
        assert!(
            self.is_scalar(),
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    /// Extent along dimension `i`.
    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    /// Element of a 2-D tensor.
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    /// Row `r` of a 2-D tensor as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        assert_eq!(self.rank(), 2, "row() on tensor of shape {:?}", self.shape);
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.data.len(), "reshape to {:?} changes size", shape);
        self.shape = shape;
        self
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Broadcast result shape, or `None` if the pair is not broadcastable.
///
/// Broadcasting is deliberately narrow: shapes must be equal, or one operand
/// is a scalar, or one shape is a trailing suffix of the other. Size-1 axis
/// expansion in the middle of a shape is rejected so that every backward
/// rule stays a contiguous tile reduction.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a == b {
        return Some(a.to_vec());
    }
    let numel = |s: &[usize]| s.iter().product::<usize>();
    if numel(a) == 1 && numel(b) == 1 {
        // single-element tie: keep the higher-rank shape
        return Some(if a.len() >= b.len() { a.to_vec() } else { b.to_vec() });
    }
    if numel(a) == 1 {
        return Some(b.to_vec());
    }
    if numel(b) == 1 {
        return Some(a.to_vec());
    }
    if is_suffix(a, b) {
        return Some(b.to_vec());
    }
    if is_suffix(b, a) {
        return Some(a.to_vec());
    }
    None
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_agree() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(t.numel(), 6);
        assert_eq!(t.at2(1, 2), 6.0);
        assert_eq!(t.row(0), &[1.0, 2.0, 3.0]);
    }

    #[test]
    #[should_panic(expected = "implies 6 elements")]
    fn shape_mismatch_panics() {
        Tensor::new(vec![2, 3], vec![0.0; 5]);
    }

    #[test]
    fn broadcast_rules() {
        // equal
        assert_eq!(broadcast_shape(&[2, 3], &[2, 3]), Some(vec![2, 3]));
        // scalar
        assert_eq!(broadcast_shape(&[], &[4, 2]), Some(vec![4, 2]));
        assert_eq!(broadcast_shape(&[4, 2], &[1]), Some(vec![4, 2]));
        // single-element tie keeps the higher rank
        assert_eq!(broadcast_shape(&[1, 1], &[1]), Some(vec![1, 1]));
        assert_eq!(broadcast_shape(&[1], &[1, 1]), Some(vec![1, 1]));
        // trailing suffix
        assert_eq!(broadcast_shape(&[3], &[5, 3]), Some(vec![5, 3]));
        assert_eq!(broadcast_shape(&[5, 3], &[3]), Some(vec![5, 3]));
        // anything richer is rejected
        assert_eq!(broadcast_shape(&[5, 1], &[5, 3]), None);
        assert_eq!(broadcast_shape(&[2, 3], &[3, 2]), None);
    }
}
