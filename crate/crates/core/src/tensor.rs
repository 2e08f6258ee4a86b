//! Dense storage: rank-4 activation tensors, general matrices, and the
//! symmetric-matrix wrapper the whitening kernels operate on.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense `(N, C, H, W)` tensor, row-major with `W` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<S> {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<S>,
}

impl<S: Scalar> Tensor4<S> {
    /// Builds a tensor from externally supplied data, rejecting length
    /// mismatches and non-finite entries.
    pub fn new(shape: (usize, usize, usize, usize), data: Vec<S>) -> Result<Self> {
        let (n, c, h, w) = shape;
        let len = n * c * h * w;
        if data.len() != len {
            return Err(Error::ShapeError(format!(
                "tensor data length {} does not match shape {:?} (expected {})",
                data.len(),
                shape,
                len
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite tensor entry at flat index {i}"
            )));
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn zeros(shape: (usize, usize, usize, usize)) -> Self {
        let (n, c, h, w) = shape;
        Self {
            n,
            c,
            h,
            w,
            data: vec![S::zero(); n * c * h * w],
        }
    }

    /// Standard-normal tensor; samples are drawn in `f64` so the stream is
    /// identical for every scalar type given the same generator state.
    pub fn random_normal<R: Rng>(shape: (usize, usize, usize, usize), rng: &mut R) -> Self {
        let (n, c, h, w) = shape;
        let data = (0..n * c * h * w)
            .map(|_| S::from_f64(rng.sample(StandardNormal)))
            .collect();
        Self { n, c, h, w, data }
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(n < self.n && c < self.c && h < self.h && w < self.w);
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> S {
        self.data[self.idx(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: S) {
        let i = self.idx(n, c, h, w);
        self.data[i] = v;
    }

    #[inline]
    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map<T: Scalar>(&self, f: impl Fn(S) -> T) -> Tensor4<T> {
        Tensor4 {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim, dim);
        for i in 0..dim {
            m.set(i, i, S::one());
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeError(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Convenience constructor for literals in tests and examples.
    pub fn from_rows(rows: &[&[S]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
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
    pub fn get(&self, i: usize, j: usize) -> S {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: S) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix<S> {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    /// `self * rhs`.
    pub fn matmul(&self, rhs: &Matrix<S>) -> Result<Matrix<S>> {
        if self.cols != rhs.rows {
            return Err(Error::ShapeError(format!(
                "matmul: {}x{} * {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a_ik = self.data[i * self.cols + k];
                if a_ik == S::zero() {
                    continue;
                }
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row.iter()) {
                    *o += a_ik * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * rhs^T` without materializing the transpose.
    pub fn matmul_bt(&self, rhs: &Matrix<S>) -> Result<Matrix<S>> {
        if self.cols != rhs.cols {
            return Err(Error::ShapeError(format!(
                "matmul_bt: {}x{} * ({}x{})^T",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..rhs.rows {
                let b_row = rhs.row(j);
                let mut acc = S::zero();
                for (&a, &b) in a_row.iter().zip(b_row.iter()) {
                    acc += a * b;
                }
                out.set(i, j, acc);
            }
        }
        Ok(out)
    }

    /// `self^T * rhs` without materializing the transpose.
    pub fn matmul_at(&self, rhs: &Matrix<S>) -> Result<Matrix<S>> {
        if self.rows != rhs.rows {
            return Err(Error::ShapeError(format!(
                "matmul_at: ({}x{})^T * {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = rhs.row(k);
            for i in 0..self.cols {
                let a_ki = a_row[i];
                if a_ki == S::zero() {
                    continue;
                }
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += a_ki * b;
                }
            }
        }
        Ok(out)
    }

    pub fn scale(&mut self, c: S) {
        for v in &mut self.data {
            *v *= c;
        }
    }

    pub fn scaled(&self, c: S) -> Matrix<S> {
        let mut out = self.clone();
        out.scale(c);
        out
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, c: S, other: &Matrix<S>) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::ShapeError(format!(
                "add_scaled: {}x{} += {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Matrix<S>) -> Result<Matrix<S>> {
        let mut out = self.clone();
        out.add_scaled(-S::one(), other)?;
        Ok(out)
    }

    /// Subtracts `v[i]` from every entry of row `i`.
    pub fn sub_col_broadcast(&self, v: &[S]) -> Result<Matrix<S>> {
        if v.len() != self.rows {
            return Err(Error::ShapeError(format!(
                "sub_col_broadcast: vector length {} vs {} rows",
                v.len(),
                self.rows
            )));
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            let vi = v[i];
            for x in out.row_mut(i) {
                *x -= vi;
            }
        }
        Ok(out)
    }

    /// Copies columns `[start, start + len)` into a new matrix.
    pub fn col_block(&self, start: usize, len: usize) -> Matrix<S> {
        debug_assert!(start + len <= self.cols);
        let mut out = Matrix::zeros(self.rows, len);
        for i in 0..self.rows {
            out.row_mut(i)
                .copy_from_slice(&self.row(i)[start..start + len]);
        }
        out
    }

    pub fn set_col_block(&mut self, start: usize, block: &Matrix<S>) {
        debug_assert!(start + block.cols <= self.cols);
        debug_assert_eq!(block.rows, self.rows);
        for i in 0..self.rows {
            let cols = self.cols;
            self.data[i * cols + start..i * cols + start + block.cols]
                .copy_from_slice(block.row(i));
        }
    }

    /// Row sums, i.e. `self * 1`.
    pub fn row_sums(&self) -> Vec<S> {
        (0..self.rows)
            .map(|i| self.row(i).iter().copied().sum())
            .collect()
    }

    pub fn frobenius_norm(&self) -> S {
        self.data
            .iter()
            .map(|&v| v * v)
            .sum::<S>()
            .sqrt()
    }

    /// `(self + self^T) / 2`; square matrices only.
    pub fn sym_part(&self) -> Result<Matrix<S>> {
        if self.rows != self.cols {
            return Err(Error::ShapeError(format!(
                "sym_part of {}x{} matrix",
                self.rows, self.cols
            )));
        }
        let half = S::from_f64(0.5);
        let mut out = Matrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(i, j, (self.get(i, j) + self.get(j, i)) * half);
            }
        }
        Ok(out)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map<T: Scalar>(&self, f: impl Fn(S) -> T) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Frobenius inner product `sum_ij a_ij * b_ij`.
pub fn frobenius_inner<S: Scalar>(a: &Matrix<S>, b: &Matrix<S>) -> Result<S> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(Error::ShapeError(format!(
            "frobenius_inner: {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(a.data
        .iter()
        .zip(b.data.iter())
        .map(|(&x, &y)| x * y)
        .sum())
}

/// Square matrix stored dense and kept exactly symmetric: every constructor
/// that can introduce asymmetry applies `(A + A^T) / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix<S> {
    m: Matrix<S>,
}

impl<S: Scalar> SymMatrix<S> {
    /// Symmetrizes an arbitrary square matrix.
    pub fn symmetrized(m: Matrix<S>) -> Result<Self> {
        if m.rows() == 0 {
            return Err(Error::ShapeError("symmetric matrix of dimension 0".into()));
        }
        Ok(Self { m: m.sym_part()? })
    }

    /// Wraps a matrix that is symmetric by construction (no check).
    pub(crate) fn from_symmetric_unchecked(m: Matrix<S>) -> Self {
        debug_assert_eq!(m.rows(), m.cols());
        Self { m }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            m: Matrix::identity(dim),
        }
    }

    pub fn scaled_identity(dim: usize, c: S) -> Self {
        let mut m = Matrix::zeros(dim, dim);
        for i in 0..dim {
            m.set(i, i, c);
        }
        Self { m }
    }

    pub fn from_diagonal(diag: &[S]) -> Self {
        let mut m = Matrix::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m.set(i, i, d);
        }
        Self { m }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.m.rows()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> S {
        self.m.get(i, j)
    }

    /// Sets `(i, j)` and `(j, i)` together.
    pub fn set_sym(&mut self, i: usize, j: usize, v: S) {
        self.m.set(i, j, v);
        self.m.set(j, i, v);
    }

    #[inline]
    pub fn as_matrix(&self) -> &Matrix<S> {
        &self.m
    }

    pub fn into_matrix(self) -> Matrix<S> {
        self.m
    }

    pub fn diagonal(&self) -> Vec<S> {
        (0..self.dim()).map(|i| self.m.get(i, i)).collect()
    }

    /// Sum of the diagonal.
    pub fn trace(&self) -> S {
        (0..self.dim()).map(|i| self.m.get(i, i)).sum()
    }

    pub fn add_scaled_identity(&mut self, c: S) {
        for i in 0..self.dim() {
            let v = self.m.get(i, i) + c;
            self.m.set(i, i, v);
        }
    }

    /// Keeps the diagonal, zeroes everything else.
    pub fn diagonal_only(&self) -> SymMatrix<S> {
        SymMatrix::from_diagonal(&self.diagonal())
    }

    pub fn scale(&mut self, c: S) {
        self.m.scale(c);
    }

    /// `self = a * self + b * other`; elementwise, so symmetry is preserved.
    pub fn blend(&mut self, a: S, other: &SymMatrix<S>, b: S) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::ShapeError(format!(
                "blend: dim {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        for (x, &y) in self.m.data.iter_mut().zip(other.m.data.iter()) {
            *x = a * *x + b * y;
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> S {
        self.m.frobenius_norm()
    }

    pub fn map<T: Scalar>(&self, f: impl Fn(S) -> T) -> SymMatrix<T> {
        SymMatrix { m: self.m.map(f) }
    }
}

/// Trace of a square matrix.
pub fn trace<S: Scalar>(a: &Matrix<S>) -> Result<S> {
    if a.rows() != a.cols() {
        return Err(Error::ShapeError(format!(
            "trace of {}x{} matrix",
            a.rows(),
            a.cols()
        )));
    }
    Ok((0..a.rows()).map(|i| a.get(i, i)).sum())
}

pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(&x, &y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_rejects_bad_length_and_nan() {
        let err = Tensor4::<f64>::new((1, 2, 1, 1), vec![1.0]).unwrap_err();
        assert!(matches!(err, Error::ShapeError(_)));
        let err = Tensor4::<f64>::new((1, 2, 1, 1), vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn tensor_layout_w_fastest() {
        let mut t = Tensor4::<f64>::zeros((2, 3, 2, 2));
        t.set(1, 2, 1, 1, 7.0);
        assert_eq!(t.as_slice()[((1 * 3 + 2) * 2 + 1) * 2 + 1], 7.0);
    }

    #[test]
    fn matmul_identity_leaves_input() {
        let a = Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let i = Matrix::identity(3);
        assert_eq!(a.matmul(&i).unwrap(), a);
    }

    #[test]
    fn matmul_hand_case() {
        // [[1,2],[3,4]] * [[0,1],[1,0]] = [[2,1],[4,3]]
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Matrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c, Matrix::from_rows(&[&[2.0, 1.0], &[4.0, 3.0]]));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Matrix::<f64>::zeros(2, 3);
        let b = Matrix::<f64>::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(Error::ShapeError(_))));
    }

    #[test]
    fn matmul_against_inverse_oracle() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for dim in [2usize, 3, 5, 8] {
            // Random diagonally dominant matrix is safely invertible.
            let mut a = Matrix::<f64>::zeros(dim, dim);
            for i in 0..dim {
                for j in 0..dim {
                    a.set(i, j, rng.random::<f64>() - 0.5);
                }
                a.set(i, i, a.get(i, i) + dim as f64);
            }
            let inv = crate::gradcheck::oracles::invert(&a);
            let prod = a.matmul(&inv).unwrap();
            let eye = Matrix::identity(dim);
            let err = prod.sub(&eye).unwrap().frobenius_norm();
            assert!(err < 1e-10, "dim {dim}: |A A^-1 - I| = {err}");
        }
    }

    #[test]
    fn matmul_bt_and_at_agree_with_explicit_transpose() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut a = Matrix::<f64>::zeros(3, 5);
        let mut b = Matrix::<f64>::zeros(4, 5);
        for v in a.as_mut_slice() {
            *v = rng.random::<f64>() - 0.5;
        }
        for v in b.as_mut_slice() {
            *v = rng.random::<f64>() - 0.5;
        }
        assert_eq!(a.matmul_bt(&b).unwrap(), a.matmul(&b.transpose()).unwrap());
        let c = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let d = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 2.0], &[1.0, 1.0]]);
        assert_eq!(
            c.matmul_at(&d).unwrap(),
            c.transpose().matmul(&d).unwrap()
       );
    }

    #[test]
    fn frobenius_inner_trivial_cases() {
        let eye = Matrix::<f64>::identity(4);
        assert_eq!(frobenius_inner(&eye, &eye).unwrap(), 4.0);
        let z = Matrix::<f64>::zeros(4, 4);
        assert_eq!(frobenius_inner(&eye, &z).unwrap(), 0.0);
        let a = Matrix::<f64>::zeros(2, 3);
        assert!(matches!(
            frobenius_inner(&a, &Matrix::zeros(3, 2)),
            Err(Error::ShapeError(_))
        ));
    }

    #[test]
    fn frobenius_inner_matches_loop_oracle() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut a = Matrix::<f64>::zeros(4, 6);
        let mut b = Matrix::<f64>::zeros(4, 6);
        for v in a.as_mut_slice() {
            *v = rng.random::<f64>() - 0.5;
        }
        for v in b.as_mut_slice() {
            *v = rng.random::<f64>() - 0.5;
        }
        let mut expected = 0.0;
        for i in 0..4 {
            for j in 0..6 {
                expected += a.get(i, j) * b.get(i, j);
            }
        }
        assert_eq!(frobenius_inner(&a, &b).unwrap(), expected);
    }

    #[test]
    fn trace_trivial_cases() {
        assert_eq!(trace(&Matrix::<f64>::identity(5)).unwrap(), 5.0);
        let d = SymMatrix::from_diagonal(&[4.0, 1.0]);
        assert_eq!(d.trace(), 5.0);
    }

    #[test]
    fn symmetrize_halves_asymmetry() {
        let m = Matrix::from_rows(&[&[1.0, 2.0], &[0.0, 3.0]]);
        let s = SymMatrix::symmetrized(m).unwrap();
        assert_eq!(s.get(0, 1), 1.0);
        assert_eq!(s.get(1, 0), 1.0);
    }
}
