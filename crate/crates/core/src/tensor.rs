//! Dense row-major 2-D tensors.
//!
//! Everything the transformer needs is expressible over matrices: a scalar
//! is `[1, 1]`, a vector is `[1, n]`, a sequence of hidden states is
//! `[positions, width]`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(
            rows * cols,
            data.len(),
            "tensor data length {} does not match shape [{rows}, {cols}]",
            data.len()
        );
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::new(rows, cols, vec![S::zero(); rows * cols])
    }

    pub fn scalar(v: S) -> Self {
        Tensor::new(1, 1, vec![v])
    }

    pub fn row_vector(data: Vec<S>) -> Self {
        Tensor::new(1, data.len(), data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols + j]
    }

    pub fn item(&self) -> S {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Error unless every entry is finite.
    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NumericFault { op })
        }
    }

    pub fn map<T: Scalar>(&self, f: impl Fn(S) -> T) -> Tensor<T> {
        Tensor::new(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Largest |a - b| over all entries; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<S>) -> S {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        let mut m = S::zero();
        for (a, b) in self.data.iter().zip(&other.data) {
            let d = (*a - *b).abs();
            if d > m {
                m = d;
            }
        }
        m
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * S::BYTES);
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_invariant_holds() {
        let t = Tensor::<f64>::zeros(3, 4);
        assert_eq!(t.shape(), [3, 4]);
        assert_eq!(t.len(), 12);
    }

    #[test]
    #[should_panic]
    fn mismatched_data_length_panics() {
        let _ = Tensor::new(2, 2, vec![0.0f64; 3]);
    }

    #[test]
    fn finite_check_flags_nan() {
        let mut t = Tensor::<f32>::zeros(1, 2);
        assert!(t.check_finite("test").is_ok());
        t.data_mut()[1] = f32::NAN;
        assert!(t.check_finite("test").is_err());
    }
}
