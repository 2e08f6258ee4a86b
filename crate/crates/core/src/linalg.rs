//! Symmetric eigendecomposition via cyclic Jacobi rotations.
//!
//! The whitening kernels only ever decompose small group covariances
//! (dimension <= 64), where Jacobi is simple, accurate, and plenty fast.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, SymMatrix};

/// Maximum number of full Jacobi sweeps before giving up.
const MAX_SWEEPS: usize = 100;

/// Eigendecomposition of a symmetric matrix: `vectors * diag(values) *
/// vectors^T` reconstructs the input. Eigenvalues are sorted descending and
/// each eigenvector's largest-magnitude component (ties: lowest index) is
/// made positive, so the decomposition is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct EigPair<S> {
    pub values: Vec<S>,
    pub vectors: Matrix<S>,
}

impl<S: Scalar> EigPair<S> {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `D * diag(values) * D^T`.
    pub fn reconstruct(&self) -> Matrix<S> {
        let dim = self.dim();
        let mut scaled = self.vectors.clone();
        for i in 0..dim {
            for j in 0..dim {
                scaled.set(i, j, self.vectors.get(i, j) * self.values[j]);
            }
        }
        scaled.matmul_bt(&self.vectors).expect("square")
    }

    /// `D * diag(values^p) * D^T` for elementwise powers of the spectrum.
    pub fn apply_spectral(&self, f: impl Fn(S) -> S) -> SymMatrix<S> {
        let dim = self.dim();
        let mut scaled = self.vectors.clone();
        for i in 0..dim {
            for j in 0..dim {
                scaled.set(i, j, self.vectors.get(i, j) * f(self.values[j]));
            }
        }
        let m = scaled.matmul_bt(&self.vectors).expect("square");
        // Exact symmetry for downstream consumers; the product is symmetric
        // up to roundoff already.
        SymMatrix::from_symmetric_unchecked(m.sym_part().expect("square"))
    }
}

fn off_diagonal_norm<S: Scalar>(a: &Matrix<S>) -> S {
    let n = a.rows();
    let mut acc = S::zero();
    for p in 0..n {
        for q in 0..n {
            if p != q {
                let v = a.get(p, q);
                acc += v * v;
            }
        }
    }
    acc.sqrt()
}

/// Jacobi eigendecomposition of a symmetric matrix.
///
/// Converges when the off-diagonal Frobenius norm drops below
/// `max(1e-12, dim * machine_eps) * |A|_F` (the second term keeps the
/// criterion reachable in f32), with a budget of 100 sweeps.
pub fn sym_eig<S: Scalar>(a: &SymMatrix<S>) -> Result<EigPair<S>> {
    let n = a.dim();
    if !a.as_matrix().all_finite() {
        return Err(Error::InvalidInput("non-finite entry in sym_eig".into()));
    }

    let mut work = a.as_matrix().clone();
    let mut vectors = Matrix::identity(n);
    let norm = work.frobenius_norm();
    let tol_rel = S::from_f64(1e-12).max(S::epsilon() * S::from_usize(n));
    let tol = norm * tol_rel;

    if n == 1 {
        return Ok(EigPair {
            values: alloc::vec![work.get(0, 0)],
            vectors,
        });
    }

    let half = S::from_f64(0.5);
    let mut converged = norm == S::zero();
    for _ in 0..MAX_SWEEPS {
        if converged || off_diagonal_norm(&work) <= tol {
            converged = true;
            break;
        }
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = work.get(p, q);
                if apq == S::zero() {
                    continue;
                }
                rotated = true;
                let theta = (work.get(q, q) - work.get(p, p)) * half / apq;
                let t = if theta == S::zero() {
                    S::one()
                } else {
                    let sign = if theta < S::zero() { -S::one() } else { S::one() };
                    sign / (theta.abs() + (theta * theta + S::one()).sqrt())
                };
                let c = S::one() / (t * t + S::one()).sqrt();
                let s = t * c;

                let app = work.get(p, p);
                let aqq = work.get(q, q);
                work.set(p, p, app - t * apq);
                work.set(q, q, aqq + t * apq);
                work.set(p, q, S::zero());
                work.set(q, p, S::zero());
                for j in 0..n {
                    if j == p || j == q {
                        continue;
                    }
                    let ajp = work.get(j, p);
                    let ajq = work.get(j, q);
                    let new_p = c * ajp - s * ajq;
                    let new_q = s * ajp + c * ajq;
                    work.set(j, p, new_p);
                    work.set(p, j, new_p);
                    work.set(j, q, new_q);
                    work.set(q, j, new_q);
                }
                for j in 0..n {
                    let vjp = vectors.get(j, p);
                    let vjq = vectors.get(j, q);
                    vectors.set(j, p, c * vjp - s * vjq);
                    vectors.set(j, q, s * vjp + c * vjq);
                }
            }
        }
        // A sweep with no rotations cannot make further progress.
        if !rotated {
            converged = true;
        }
    }
    if !converged && off_diagonal_norm(&work) > tol {
        return Err(Error::NumericalFailure(format!(
            "Jacobi eigendecomposition did not converge within {MAX_SWEEPS} sweeps \
             (off-diagonal norm {:e}, tolerance {:e})",
            off_diagonal_norm(&work).as_f64(),
            tol.as_f64()
        )));
    }

    let raw_values: Vec<S> = (0..n).map(|i| work.get(i, i)).collect();

    // Stable descending sort keeps the Jacobi order deterministic on ties.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| raw_values[j].partial_cmp(&raw_values[i]).expect("finite"));

    let mut sorted_vectors = Matrix::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        // Sign convention: largest-magnitude component positive, ties broken
        // by lowest index, so repeated decompositions agree bit for bit.
        let mut best = 0usize;
        let mut best_abs = vectors.get(0, old_col).abs();
        for i in 1..n {
            let a = vectors.get(i, old_col).abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        let flip = vectors.get(best, old_col) < S::zero();
        for i in 0..n {
            let v = vectors.get(i, old_col);
            sorted_vectors.set(i, new_col, if flip { -v } else { v });
        }
    }
    Ok(EigPair {
        values: order.iter().map(|&i| raw_values[i]).collect(),
        vectors: sorted_vectors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::oracles;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(dim: usize, rng: &mut ChaCha8Rng) -> SymMatrix<f64> {
        let mut m = Matrix::zeros(dim, dim);
        for v in m.as_mut_slice() {
            *v = rng.random::<f64>() * 2.0 - 1.0;
        }
        SymMatrix::symmetrized(m).unwrap()
    }

    #[test]
    fn identity_eigendecomposition() {
        let eye = SymMatrix::<f64>::identity(3);
        let eig = sym_eig(&eye).unwrap();
        assert_eq!(eig.values, vec![1.0, 1.0, 1.0]);
        assert_eq!(eig.vectors, Matrix::identity(3));
    }

    #[test]
    fn diagonal_eigendecomposition() {
        let d = SymMatrix::from_diagonal(&[4.0, 1.0]);
        let eig = sym_eig(&d).unwrap();
        assert_eq!(eig.values, vec![4.0, 1.0]);
        assert_eq!(eig.vectors, Matrix::identity(2));
    }

    #[test]
    fn eigenvalues_match_characteristic_polynomial_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let a = random_symmetric(3, &mut rng);
            let eig = sym_eig(&a).unwrap();
            let mut expected = oracles::sym3_eigenvalues(a.as_matrix());
            expected.sort_by(|x, y| y.partial_cmp(x).unwrap());
            for (got, want) in eig.values.iter().zip(expected.iter()) {
                assert!(
                    (got - want).abs() < 1e-10,
                    "eig {got} vs cubic root {want}"
                );
            }
        }
    }

    #[test]
    fn round_trip_and_orthonormality() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for dim in [1usize, 2, 3, 5, 8, 16] {
            let a = random_symmetric(dim, &mut rng);
            let eig = sym_eig(&a).unwrap();
            let rec = eig.reconstruct();
            let err = rec.sub(a.as_matrix()).unwrap().frobenius_norm();
            assert!(err <= 1e-8 * a.as_matrix().frobenius_norm().max(1.0));
            let gram = eig.vectors.matmul_at(&eig.vectors).unwrap();
            let ortho_err = gram.sub(&Matrix::identity(dim)).unwrap().frobenius_norm();
            assert!(ortho_err <= 1e-8, "dim {dim}: orthonormality {ortho_err}");
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut m = Matrix::<f64>::identity(2);
        m.set(0, 1, f64::INFINITY);
        m.set(1, 0, f64::INFINITY);
        let s = SymMatrix::from_symmetric_unchecked(m);
        assert!(matches!(sym_eig(&s), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn sign_convention_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_symmetric(5, &mut rng);
        let e1 = sym_eig(&a).unwrap();
        let e2 = sym_eig(&a).unwrap();
        assert_eq!(e1, e2);
        for j in 0..5 {
            let col: Vec<f64> = (0..5).map(|i| e1.vectors.get(i, j)).collect();
            let mut best = 0;
            for i in 1..5 {
                if col[i].abs() > col[best].abs() {
                    best = i;
                }
            }
            assert!(col[best] > 0.0, "column {j} sign convention violated");
        }
    }
}
