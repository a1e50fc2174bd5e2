//! Dense row-major `f64` matrices, with the handful of ops the toy model needs.

use serde::{Deserialize, Serialize};

use super::AdapterError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AdapterError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(AdapterError::Shape(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(AdapterError::Shape(format!("non-finite value {v}")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { shape: vec![rows, cols], data: vec![0.0; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Tensor { shape: vec![rows, cols], data }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn bytes(&self) -> u64 {
        8 * self.data.len() as u64
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Rows `start..end` as a new tensor.
    pub fn row_block(&self, start: usize, end: usize) -> Tensor {
        let c = self.cols();
        Tensor { shape: vec![end - start, c], data: self.data[start * c..end * c].to_vec() }
    }

    /// Columns `start..end` as a new tensor.
    pub fn col_block(&self, start: usize, end: usize) -> Tensor {
        Tensor::from_fn(self.rows(), end - start, |i, j| self.get(i, start + j))
    }

    /// Stacks tensors with equal column counts on top of each other.
    pub fn vstack(parts: &[&Tensor]) -> Tensor {
        let cols = parts.first().map_or(0, |t| t.cols());
        let mut data = Vec::new();
        for p in parts {
            debug_assert_eq!(p.cols(), cols);
            data.extend_from_slice(&p.data);
        }
        let rows = data.len() / cols.max(1);
        Tensor { shape: vec![rows, cols], data }
    }

    /// Places tensors with equal row counts side by side.
    pub fn hstack(parts: &[Tensor]) -> Tensor {
        let rows = parts.first().map_or(0, |t| t.rows());
        let cols: usize = parts.iter().map(|p| p.cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            for i in 0..rows {
                for j in 0..p.cols() {
                    out.set(i, off + j, p.get(i, j));
                }
            }
            off += p.cols();
        }
        out
    }

    pub fn transpose(&self) -> Tensor {
        Tensor::from_fn(self.cols(), self.rows(), |i, j| self.get(j, i))
    }

    /// Plain `i-k-j` matrix product.
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.cols(), rhs.rows(), "matmul {:?} x {:?}", self.shape, rhs.shape);
        let (n, k, m) = (self.rows(), self.cols(), rhs.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let o = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                let r = &rhs.data[p * m..(p + 1) * m];
                for j in 0..m {
                    o[j] += a * r[j];
                }
            }
        }
        Tensor { shape: vec![n, m], data: out }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip(&self, rhs: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, rhs.shape);
        Tensor { shape: self.shape.clone(), data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect() }
    }

    pub fn add(&self, rhs: &Tensor) -> Tensor {
        self.zip(rhs, |a, b| a + b)
    }

    pub fn add_assign(&mut self, rhs: &Tensor) {
        assert_eq!(self.shape, rhs.shape);
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
    }

    /// Adds a `1 x cols` row to every row.
    pub fn add_row(&self, bias: &Tensor) -> Tensor {
        Tensor::from_fn(self.rows(), self.cols(), |i, j| self.get(i, j) + bias.get(0, j))
    }

    /// Column sums as a `1 x cols` row.
    pub fn col_sum(&self) -> Tensor {
        let mut out = Tensor::zeros(1, self.cols());
        for i in 0..self.rows() {
            for j in 0..self.cols() {
                out.data[j] += self.get(i, j);
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_length_and_non_finite() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![1, 1], vec![f64::NAN]).is_err());
        assert!(Tensor::new(vec![1, 2], vec![1.0, 2.0]).is_ok());
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        assert_eq!(a.matmul(&b).data(), &[58.0, 64.0, 139.0, 154.0]);
        assert_eq!(a.transpose().transpose(), a);
    }

    #[test]
    fn blocks_round_trip() {
        let a = Tensor::from_fn(4, 6, |i, j| (i * 6 + j) as f64);
        let cols = Tensor::hstack(&[a.col_block(0, 2), a.col_block(2, 6)]);
        assert_eq!(cols, a);
        let top = a.row_block(0, 1);
        let rest = a.row_block(1, 4);
        assert_eq!(Tensor::vstack(&[&top, &rest]), a);
    }
}
