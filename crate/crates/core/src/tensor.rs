//! Dense row-major matrices of `f64` and a strided GEMM wrapper.
//!
//! Every tensor in the network is a matrix; higher-rank quantities are laid
//! out with the leading axes flattened into rows (for example an `N×N×C`
//! pair representation is an `(N·N) × C` matrix with row `i·N + j`).

use std::fmt;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}×{})", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length");
        Tensor { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor { rows, cols, data }
    }

    pub fn column(values: &[f64]) -> Self {
        Tensor::from_vec(values.len(), 1, values.to_vec())
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Tensor::from_vec(1, values.len(), values.to_vec())
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_vec(1, 1, vec![value])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn scalar_value(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "not a scalar");
        self.data[0]
    }

    pub fn reshaped(mut self, rows: usize, cols: usize) -> Self {
        assert_eq!(rows * cols, self.data.len(), "reshape size");
        self.rows = rows;
        self.cols = cols;
        self
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Tensor::zeros(self.rows, other.cols);
        gemm(
            self.rows,
            self.cols,
            other.cols,
            1.0,
            (&self.data, self.cols, 1),
            (&other.data, other.cols, 1),
            0.0,
            (&mut out.data, other.cols, 1),
        );
        out
    }

    pub fn transpose(&self) -> Tensor {
        Tensor::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }
}

/// `c ← alpha·a·b + beta·c` on strided views, `a` is m×k and `b` is k×n.
///
/// Each operand is `(slice, row_stride, col_stride)`; views may start at any
/// offset of the slice as long as every addressed element is in bounds.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: (&[f64], usize, usize),
    b: (&[f64], usize, usize),
    beta: f64,
    c: (&mut [f64], usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let (c_data, rsc, csc) = c;
    assert!((m - 1) * rsc + (n - 1) * csc < c_data.len(), "gemm c bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = i * rsc + j * csc;
                c_data[idx] = if beta == 0.0 { 0.0 } else { beta * c_data[idx] };
            }
        }
        return;
    }
    let (a_data, rsa, csa) = a;
    let (b_data, rsb, csb) = b;
    assert!((m - 1) * rsa + (k - 1) * csa < a_data.len(), "gemm a bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b_data.len(), "gemm b bounds");
    // SAFETY: the asserts above keep every addressed element inside its slice,
    // and `c` is a unique borrow distinct from `a` and `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a_data.as_ptr(),
            rsa as isize,
            csa as isize,
            b_data.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c_data.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_naive() {
        let a = Tensor::from_fn(3, 4, |r, c| (r * 4 + c) as f64 * 0.5 - 1.0);
        let b = Tensor::from_fn(4, 2, |r, c| (r as f64 - c as f64) * 0.25);
        let c = a.matmul(&b);
        for i in 0..3 {
            for j in 0..2 {
                let naive: f64 = (0..4).map(|k| a.get(i, k) * b.get(k, j)).sum();
                assert!((c.get(i, j) - naive).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn strided_gemm_transposed_operand() {
        let a = Tensor::from_fn(2, 3, |r, c| (r + 2 * c) as f64);
        let b = Tensor::from_fn(2, 3, |r, c| (3 * r + c) as f64 - 2.0);
        // a · bᵀ
        let mut out = vec![0.0; 4];
        gemm(2, 3, 2, 1.0, (a.data(), 3, 1), (b.data(), 1, 3), 0.0, (&mut out, 2, 1));
        let expected = a.matmul(&b.transpose());
        assert_eq!(out, expected.data());
    }
}
