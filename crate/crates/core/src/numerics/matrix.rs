use std::ops::{Index, IndexMut};

use super::Scalar;
use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// Dense column vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Vector<T> {
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    /// Checked constructor: length must equal `rows * cols` and every entry
    /// must be finite.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "Matrix::from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "matrix entry ({}, {})",
                i / cols.max(1),
                i % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Unchecked constructor for internal use where shapes are known.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
            return Err(Error::Misaligned {
                index: bad,
                message: format!("row has {} entries, expected {cols}", rows[bad].len()),
            });
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn diagonal(values: &[T]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Block-diagonal matrix from square blocks.
    pub fn block_diag(blocks: &[Matrix<T>]) -> Self {
        let n: usize = blocks.iter().map(|b| b.rows).sum();
        let mut m = Self::zeros(n, n);
        let mut off = 0;
        for b in blocks {
            for r in 0..b.rows {
                for c in 0..b.cols {
                    m[(off + r, off + c)] = b[(r, c)];
                }
            }
            off += b.rows;
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_vector(&self, r: usize) -> Vector<T> {
        Vector::from_raw(self.row(r).to_vec())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Standard product with a fixed `i, k, j` accumulation order.
    pub fn matmul(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        gemm_into(self, other, &mut out);
        Ok(out)
    }

    pub fn matvec(&self, v: &Vector<T>) -> Result<Vector<T>> {
        if self.cols != v.dim() {
            return Err(Error::DimensionMismatch {
                op: "matvec",
                left: self.shape(),
                right: (v.dim(), 1),
            });
        }
        let data = (0..self.rows)
            .map(|r| dot_slices(self.row(r), v.data()))
            .collect();
        Ok(Vector::from_raw(data))
    }

    pub fn add(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Matrix<T> {
        self.map(|x| x * s)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Matrix<T> {
        Self::from_raw(self.rows, self.cols, self.data.iter().map(|&x| f(x)).collect())
    }

    fn zip_with(
        &self,
        other: &Matrix<T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Matrix<T>> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self::from_raw(self.rows, self.cols, data))
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    /// Largest absolute elementwise difference; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix<T>) -> T {
        if self.shape() != other.shape() {
            return T::infinity();
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// Dense inverse by Gauss-Jordan elimination with partial pivoting.
    pub fn inverse(&self) -> Result<Matrix<T>> {
        if self.rows != self.cols {
            return Err(Error::DimensionMismatch {
                op: "inverse",
                left: self.shape(),
                right: self.shape(),
            });
        }
        let n = self.rows;
        let mut a = self.clone();
        let mut inv = Self::identity(n);
        let scale = self
            .data
            .iter()
            .fold(T::zero(), |m, x| m.max(x.abs()))
            .max(T::one());
        let tol = T::epsilon() * T::lit(64.0) * scale;
        for col in 0..n {
            let pivot_row = (col..n)
                .max_by(|&x, &y| {
                    a[(x, col)]
                        .abs()
                        .partial_cmp(&a[(y, col)].abs())
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
                .unwrap_or(col);
            let pivot = a[(pivot_row, col)];
            if pivot.abs() <= tol {
                return Err(Error::Singular {
                    pivot: pivot.as_f64(),
                });
            }
            if pivot_row != col {
                a.swap_rows(pivot_row, col);
                inv.swap_rows(pivot_row, col);
            }
            let p_inv = T::one() / pivot;
            for c in 0..n {
                a[(col, c)] = a[(col, c)] * p_inv;
                inv[(col, c)] = inv[(col, c)] * p_inv;
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let factor = a[(r, col)];
                if factor == T::zero() {
                    continue;
                }
                for c in 0..n {
                    a[(r, c)] = a[(r, c)] - factor * a[(col, c)];
                    inv[(r, c)] = inv[(r, c)] - factor * inv[(col, c)];
                }
            }
        }
        Ok(inv)
    }

    fn swap_rows(&mut self, a: usize, b: usize) {
        for c in 0..self.cols {
            self.data.swap(a * self.cols + c, b * self.cols + c);
        }
    }
}

/// `out += a * b`, accumulated in `i, k, j` order.
pub(crate) fn gemm_into<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, out: &mut Matrix<T>) {
    let (n, k_dim, m) = (a.rows, a.cols, b.cols);
    for i in 0..n {
        let out_row = &mut out.data[i * m..(i + 1) * m];
        for k in 0..k_dim {
            let aik = a.data[i * k_dim + k];
            if aik == T::zero() {
                continue;
            }
            let b_row = &b.data[k * m..(k + 1) * m];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o = *o + aik * bkj;
            }
        }
    }
}

#[inline]
pub(crate) fn dot_slices<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &T {
        &self.data[r * self.cols + c]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        &mut self.data[r * self.cols + c]
    }
}

impl<T: Scalar> Vector<T> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            data: vec![T::zero(); dim],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Result<Self> {
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("vector entry {i}")));
        }
        Ok(Self { data })
    }

    pub(crate) fn from_raw(data: Vec<T>) -> Self {
        Self { data }
    }

    pub fn from_f64(values: &[f64]) -> Result<Self> {
        Self::from_vec(values.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn unit(dim: usize, i: usize) -> Self {
        let mut v = Self::zeros(dim);
        v.data[i] = T::one();
        v
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn dot(&self, other: &Vector<T>) -> Result<T> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                op: "dot",
                left: (self.dim(), 1),
                right: (other.dim(), 1),
            });
        }
        Ok(dot_slices(&self.data, &other.data))
    }

    pub fn norm(&self) -> T {
        dot_slices(&self.data, &self.data).sqrt()
    }

    pub fn scale(&self, s: T) -> Self {
        Self::from_raw(self.data.iter().map(|&x| x * s).collect())
    }

    pub fn max_abs_diff(&self, other: &Vector<T>) -> T {
        if self.dim() != other.dim() {
            return T::infinity();
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// As a `1 x dim` row matrix.
    pub fn as_row(&self) -> Matrix<T> {
        Matrix::from_raw(1, self.dim(), self.data.clone())
    }
}

impl<T> Index<usize> for Vector<T> {
    type Output = T;

    #[inline]
    fn index(&self, i: usize) -> &T {
        &self.data[i]
    }
}

impl<T> IndexMut<usize> for Vector<T> {
    #[inline]
    fn index_mut(&mut self, i: usize) -> &mut T {
        &mut self.data[i]
    }
}

/// Free-function form of [`Matrix::matmul`].
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    a.matmul(b)
}

/// Masked softmax. `mask[i] == true` means entry `i` takes part; masked
/// entries get weight exactly zero.
pub fn softmax<T: Scalar>(scores: &Vector<T>, mask: &[bool]) -> Result<Vector<T>> {
    if mask.len() != scores.dim() {
        return Err(Error::DimensionMismatch {
            op: "softmax",
            left: (scores.dim(), 1),
            right: (mask.len(), 1),
        });
    }
    let mut out = vec![T::zero(); scores.dim()];
    softmax_row_into(scores.data(), mask, &mut out).ok_or(Error::DegenerateRow { row: 0 })?;
    Ok(Vector::from_raw(out))
}

/// Writes the masked softmax of `scores` into `out`. Returns `None` when all
/// entries are masked.
pub(crate) fn softmax_row_into<T: Scalar>(scores: &[T], mask: &[bool], out: &mut [T]) -> Option<()> {
    let max = scores
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&s, _)| s)
        .fold(None, |acc: Option<T>, s| Some(acc.map_or(s, |a| a.max(s))))?;
    let mut total = T::zero();
    for ((o, &s), &m) in out.iter_mut().zip(scores).zip(mask) {
        *o = if m { (s - max).exp() } else { T::zero() };
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
    Some(())
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn finite_diff_grad<T: Scalar>(
    mut f: impl FnMut(&Vector<T>) -> T,
    x: &Vector<T>,
    h: T,
) -> Result<Vector<T>> {
    let two_h = h + h;
    let mut probe = x.clone();
    let mut grad = Vector::zeros(x.dim());
    for i in 0..x.dim() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteEvaluation { coord: i });
        }
        grad[i] = (plus - minus) / two_h;
    }
    Ok(grad)
}

/// Default step for [`finite_diff_grad`].
pub const DEFAULT_FD_STEP: f64 = 1e-5;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn loop_matmul(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            (0..a.cols()).map(|k| a[(i, k)] * b[(k, j)]).sum()
        })
    }

    #[test]
    fn matmul_identity_and_hand_example() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = m(&[&[5.0], &[6.0]]);
        assert_eq!(Matrix::identity(2).matmul(&a).unwrap(), a);
        assert_eq!(a.matmul(&b).unwrap(), m(&[&[17.0], &[39.0]]));
        assert_eq!(a.matmul(&b).unwrap(), loop_matmul(&a, &b));
        let z = Matrix::<f64>::zeros(2, 2);
        assert_eq!(z.matmul(&a).unwrap(), z);
    }

    #[test]
    fn matmul_mismatch_names_shapes() {
        let a = Matrix::<f64>::zeros(2, 3);
        let err = a.matmul(&a).unwrap_err().to_string();
        assert!(err.contains("(2, 3)"), "{err}");
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![1.0]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let v = Vector::<f64>::from_f64(&[0.0, 0.0]).unwrap();
        let s = softmax(&v, &[true, true]).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        let v = Vector::<f64>::from_f64(&[2f64.ln(), 0.0]).unwrap();
        let s = softmax(&v, &[true, true]).unwrap();
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s[1] - 1.0 / 3.0).abs() < 1e-15);

        let v = Vector::<f64>::from_f64(&[5.0, 5.0]).unwrap();
        let s = softmax(&v, &[true, false]).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_all_masked_is_error() {
        let v = Vector::<f64>::from_f64(&[1.0, 2.0]).unwrap();
        assert!(matches!(
            softmax(&v, &[false, false]),
            Err(Error::DegenerateRow { .. })
        ));
    }

    #[test]
    fn softmax_is_stable_for_large_scores() {
        let v = Vector::<f64>::from_f64(&[1000.0, 999.0]).unwrap();
        let s = softmax(&v, &[true, true]).unwrap();
        assert!(s.data().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn finite_diff_examples() {
        let x = Vector::<f64>::from_f64(&[1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|v: &Vector<f64>| v.dot(v).unwrap(), &x, 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);

        let g = finite_diff_grad(|_: &Vector<f64>| 3.0, &x, 1e-5).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0]);
    }

    #[test]
    fn finite_diff_reports_offending_coordinate() {
        let x = Vector::<f64>::from_f64(&[1.0, 2.0]).unwrap();
        let err = finite_diff_grad(
            |v: &Vector<f64>| if v[1] > 2.0 { f64::NAN } else { 0.0 },
            &x,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteEvaluation { coord: 1 }));
    }

    #[test]
    fn inverse_round_trip_and_singular() {
        let a = m(&[&[4.0, 7.0], &[2.0, 6.0]]);
        let inv = a.inverse().unwrap();
        assert!(a.matmul(&inv).unwrap().max_abs_diff(&Matrix::identity(2)) < 1e-12);
        let s = m(&[&[1.0, 2.0], &[2.0, 4.0]]);
        assert!(matches!(s.inverse(), Err(Error::Singular { .. })));
    }

    #[test]
    fn generic_over_f32() {
        let a = Matrix::<f32>::identity(3);
        let b = Matrix::<f32>::from_fn(3, 3, |r, c| (r * 3 + c) as f32);
        assert_eq!(a.matmul(&b).unwrap(), b);
        let s = softmax(&Vector::<f32>::zeros(4), &[true; 4]).unwrap();
        assert!((s.data().iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    fn mat4() -> impl Strategy<Value = Matrix<f64>> {
        proptest::collection::vec(-2.0f64..2.0, 16)
            .prop_map(|d| Matrix::from_vec(4, 4, d).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_is_associative(a in mat4(), b in mat4(), c in mat4()) {
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            prop_assert!(left.max_abs_diff(&right) <= 1e-9);
        }

        #[test]
        fn softmax_is_probability_vector(
            scores in proptest::collection::vec(-50.0f64..50.0, 1..20),
            seed in any::<u64>(),
        ) {
            let n = scores.len();
            let mut mask: Vec<bool> = (0..n).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
            mask[(seed as usize) % n] = true;
            let p = softmax(&Vector::from_vec(scores).unwrap(), &mask).unwrap();
            prop_assert!(p.data().iter().all(|&x| x >= 0.0));
            prop_assert!((p.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (x, m) in p.data().iter().zip(&mask) {
                if !m { prop_assert_eq!(*x, 0.0); }
            }
        }

        #[test]
        fn finite_diff_recovers_linear_coefficients(
            coef in proptest::collection::vec(-5.0f64..5.0, 1..8),
        ) {
            let x = Vector::zeros(coef.len());
            let c = Vector::from_vec(coef.clone()).unwrap();
            let g = finite_diff_grad(|v: &Vector<f64>| c.dot(v).unwrap(), &x, DEFAULT_FD_STEP).unwrap();
            prop_assert!(g.max_abs_diff(&c) <= 1e-6);
        }
    }
}
