//! Dense rank-2 tensors and a define-by-run reverse-mode graph.
//!
//! Every value is a row-major `rows x cols` matrix of `f64`. Vectors are
//! `1 x n` rows and scalars are `1 x 1`. Non-finite values are rejected at
//! construction and after every graph operation.

mod gradcheck;
mod graph;

pub use gradcheck::{finite_diff_check, finite_diff_check_with, relative_error, GradCheckReport, GRAD_FLOOR};
pub use graph::{Gradients, Graph, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from row-major values, checking length and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "tensor",
                left: (rows, cols),
                right: (1, data.len()),
            });
        }
        let t = Tensor { rows, cols, data };
        t.ensure_finite("tensor")?;
        Ok(t)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    /// A single row.
    pub fn row_vector(values: &[f64]) -> Result<Self> {
        Tensor::new(1, values.len(), values.to_vec())
    }

    /// Builds a tensor from nested rows; all rows must have equal length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    left: (1, cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::new(rows.len(), cols, data)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw values. Callers are responsible for keeping
    /// them finite; [`Tensor::ensure_finite`] re-validates.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single value of a `1 x 1` tensor.
    pub fn item(&self) -> Result<f64> {
        if self.shape() != (1, 1) {
            return Err(Error::NotScalar {
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok(self.data[0])
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Euclidean norm over all entries.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Copies the listed rows, in order, into a new tensor.
    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            rows: m,
            cols: n,
            data: out,
        })
    }

    /// `self * other^T` without materializing the transpose.
    pub(crate) fn matmul_nt(&self, other: &Tensor) -> Tensor {
        debug_assert_eq!(self.cols, other.cols);
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        Tensor {
            rows: m,
            cols: n,
            data: out,
        }
    }

    /// `self^T * other` without materializing the transpose.
    pub(crate) fn matmul_tn(&self, other: &Tensor) -> Tensor {
        debug_assert_eq!(self.rows, other.rows);
        let (k, m, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor {
            rows: m,
            cols: n,
            data: out,
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let cols = x.cols;
    if cols == 0 {
        return out;
    }
    for row in out.data.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length_and_nan() {
        assert!(Tensor::new(2, 2, vec![1.0; 3]).is_err());
        assert!(matches!(
            Tensor::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite { .. })
        ));
        assert!(Tensor::new(1, 1, vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn matmul_identity_and_dot() {
        let eye = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[[3.0, 4.0], [5.0, 6.0]]).unwrap();
        assert_eq!(eye.matmul(&b).unwrap(), b);

        let a = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        let c = Tensor::from_rows(&[[3.0], [4.0]]).unwrap();
        assert_eq!(a.matmul(&c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(2, 3);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
        assert!(msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = Tensor::from_rows(&[[1.0, -2.0, 0.5], [3.0, 0.0, 1.5]]).unwrap();
        let b = Tensor::from_rows(&[[0.3, 1.0, -1.0], [2.0, 2.0, 0.0]]).unwrap();
        assert_eq!(a.matmul_nt(&b), a.matmul(&b.transpose()).unwrap());
        assert_eq!(a.matmul_tn(&b), a.transpose().matmul(&b).unwrap());
    }

    #[test]
    fn softmax_examples() {
        let x = Tensor::from_rows(&[[0.0, 0.0, 0.0]]).unwrap();
        for &v in softmax_rows(&x).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = Tensor::from_rows(&[[1000.0, 1000.0]]).unwrap();
        assert_eq!(softmax_rows(&x).data(), &[0.5, 0.5]);

        // e^0 / (e^0 + e^ln3) = 1/4
        let x = Tensor::from_rows(&[[0.0, 3f64.ln()]]).unwrap();
        let p = softmax_rows(&x);
        assert!((p.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((p.get(0, 1) - 0.75).abs() < 1e-15);
    }
}
