//! Dense row-major matrices and the truncated-SVD pseudo-inverse.
//!
//! Factorizations are delegated to `nalgebra` and always run in `f64`;
//! operator application uses the plain row-major [`Matrix`] below.

use nalgebra::DMatrix;

use crate::error::{FmmError, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(FmmError::invalid(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
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
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn rows_mut(&mut self) -> std::slice::ChunksExactMut<'_, T> {
        self.data.chunks_exact_mut(self.cols.max(1))
    }

    /// `y += A x`.
    pub fn matvec_acc(&self, x: &[T], y: &mut [T]) {
        assert_eq!(x.len(), self.cols);
        assert_eq!(y.len(), self.rows);
        if self.cols == 0 {
            return;
        }
        for (row, out) in self.data.chunks_exact(self.cols).zip(y.iter_mut()) {
            *out += dot(row, x);
        }
    }

    /// `y += alpha A x`.
    pub fn matvec_scaled_acc(&self, alpha: T, x: &[T], y: &mut [T]) {
        assert_eq!(x.len(), self.cols);
        assert_eq!(y.len(), self.rows);
        if self.cols == 0 {
            return;
        }
        for (row, out) in self.data.chunks_exact(self.cols).zip(y.iter_mut()) {
            *out += alpha * dot(row, x);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::of(v.to_f64_lossless())).collect(),
        }
    }

    pub fn scaled(mut self, alpha: T) -> Self {
        for v in &mut self.data {
            *v *= alpha;
        }
        self
    }
}

/// Dot product with eight independent partial sums, which lets the compiler
/// vectorize the loop.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let mut acc = [T::zero(); LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let (ra, rb) = (&a[c * LANES..(c + 1) * LANES], &b[c * LANES..(c + 1) * LANES]);
        for l in 0..LANES {
            acc[l] += ra[l] * rb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * LANES..a.len() {
        tail += a[i] * b[i];
    }
    let s = (acc[0] + acc[4]) + (acc[1] + acc[5]) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    s + tail
}

impl Matrix<f64> {
    pub(crate) fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub(crate) fn from_nalgebra(m: &DMatrix<f64>) -> Self {
        let (rows, cols) = m.shape();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(m[(r, c)]);
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn matmul(&self, other: &Matrix<f64>) -> Matrix<f64> {
        assert_eq!(self.cols, other.rows);
        Matrix::from_nalgebra(&(self.to_nalgebra() * other.to_nalgebra()))
    }
}

/// Moore-Penrose pseudo-inverse by SVD, discarding singular values below
/// `cutoff * sigma_max`. `name` labels the matrix in errors.
pub fn pseudo_inverse(m: &Matrix<f64>, cutoff: f64, name: &str) -> Result<Matrix<f64>> {
    let rank_err = |detail: String| FmmError::RankDeficient {
        matrix: name.to_string(),
        detail,
    };
    if !m.is_finite() {
        return Err(rank_err("non-finite entries".into()));
    }
    if m.rows == 0 || m.cols == 0 {
        return Err(rank_err("empty matrix".into()));
    }
    let svd = m
        .to_nalgebra()
        .try_svd(true, true, f64::EPSILON, 10_000)
        .ok_or_else(|| rank_err("SVD did not converge".into()))?;
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let sigma = &svd.singular_values;
    let smax = sigma.max();
    if !(smax > 0.0) {
        return Err(rank_err("all singular values vanish".into()));
    }
    let threshold = cutoff * smax;
    let kept: Vec<usize> = (0..sigma.len()).filter(|&i| sigma[i] >= threshold).collect();
    // pinv = V diag(1/sigma) U^T over the kept singular triplets
    let mut v_scaled = DMatrix::<f64>::zeros(m.cols, kept.len());
    let mut u_kept = DMatrix::<f64>::zeros(m.rows, kept.len());
    for (j, &i) in kept.iter().enumerate() {
        let inv = 1.0 / sigma[i];
        for r in 0..m.cols {
            v_scaled[(r, j)] = vt[(i, r)] * inv;
        }
        for r in 0..m.rows {
            u_kept[(r, j)] = u[(r, i)];
        }
    }
    let pinv = Matrix::from_nalgebra(&(v_scaled * u_kept.transpose()));
    if !pinv.is_finite() {
        return Err(rank_err("pseudo-inverse has non-finite entries".into()));
    }
    Ok(pinv)
}
