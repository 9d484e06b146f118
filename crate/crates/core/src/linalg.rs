//! Small dense row-major matrices. Kronecker factors in the loss assembly are at
//! most a few hundred entries per side, so nothing here is blocked or vectorized.

use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn scalar(v: T) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn matmul(&self, other: &Mat<T>) -> Result<Mat<T>> {
        if self.cols != other.rows {
            return Err(Error::shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == T::zero() {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn kron(&self, other: &Mat<T>) -> Mat<T> {
        let rows = self.rows * other.rows;
        let cols = self.cols * other.cols;
        let mut out = Mat::zeros(rows, cols);
        kron_into(
            &self.data,
            (self.rows, self.cols),
            &other.data,
            (other.rows, other.cols),
            T::one(),
            &mut out.data,
        );
        out
    }

    pub fn transpose(&self) -> Mat<T> {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn scale(mut self, s: T) -> Mat<T> {
        self.data.iter_mut().for_each(|v| *v *= s);
        self
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: T, other: &Mat<T>) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }
}

/// `out += s * (a ⊗ b)` for row-major `a` (p×q) and `b` (m×n); `out` is (pm)×(qn).
#[inline]
pub fn kron_into<T: Scalar>(
    a: &[T],
    (p, q): (usize, usize),
    b: &[T],
    (m, n): (usize, usize),
    s: T,
    out: &mut [T],
) {
    let out_cols = q * n;
    for i in 0..p {
        for j in 0..q {
            let aij = s * a[i * q + j];
            for k in 0..m {
                let row = &mut out[(i * m + k) * out_cols + j * n..(i * m + k) * out_cols + j * n + n];
                let brow = &b[k * n..k * n + n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aij * bv;
                }
            }
        }
    }
}

/// Row vector times matrix: `v (1×rows) · m`.
#[inline]
pub fn vec_mat<T: Scalar>(v: &[T], m: &[T], rows: usize, cols: usize, out: &mut [T]) {
    debug_assert_eq!(v.len(), rows);
    out[..cols].iter_mut().for_each(|o| *o = T::zero());
    for (i, &vi) in v.iter().enumerate() {
        if vi == T::zero() {
            continue;
        }
        for (o, &mij) in out[..cols].iter_mut().zip(&m[i * cols..(i + 1) * cols]) {
            *o += vi * mij;
        }
    }
}

/// Matrix times column vector: `m · v (cols×1)`.
#[inline]
pub fn mat_vec<T: Scalar>(m: &[T], rows: usize, cols: usize, v: &[T], out: &mut [T]) {
    debug_assert_eq!(v.len(), cols);
    for (i, o) in out[..rows].iter_mut().enumerate() {
        *o = m[i * cols..(i + 1) * cols].iter().zip(v).map(|(&a, &b)| a * b).sum();
    }
}
