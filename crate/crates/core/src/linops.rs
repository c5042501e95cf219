//! Dense linear-algebra kernel shared by the synthesis and certification
//! stages: matrix exponential, algebraic Lyapunov solve, symmetric eigenvalue
//! bounds, Hurwitz and controllability tests.
//!
//! Matrices are small here (the ODE dimension n and its 3n companion blocks),
//! so everything is dense and backed by `nalgebra`. The Lyapunov equation is
//! solved by vectorization: `P F + F^T P = -Q` becomes the n^2 x n^2 linear
//! system `(F^T (x) I + I (x) F^T) vec(P) = vec(-Q)`, which is exact and cheap
//! for the dimensions this crate sees.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Dense real matrix used throughout the crate.
pub type Mat = DMatrix<f64>;
/// Dense real column vector.
pub type Vector = DVector<f64>;

#[derive(Debug, Error)]
pub enum LinopsError {
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("matrix is not symmetric, asymmetry {defect:e}")]
    NotSymmetric { defect: f64 },
    #[error("matrix is not Hurwitz, spectral abscissa {abscissa:e}")]
    NotHurwitz { abscissa: f64 },
    #[error("matrix is not positive definite, smallest eigenvalue {min_eig:e}")]
    NotPositiveDefinite { min_eig: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("linear solve failed, residual {residual:e}")]
    SolveFailed { residual: f64 },
}

fn check_square_finite(m: &Mat) -> Result<(), LinopsError> {
    if m.nrows() != m.ncols() {
        return Err(LinopsError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    for col in 0..m.ncols() {
        for row in 0..m.nrows() {
            if !m[(row, col)].is_finite() {
                return Err(LinopsError::NonFinite { row, col });
            }
        }
    }
    Ok(())
}

/// Builds a matrix from rows; panics on ragged input. Convenience for fixtures.
pub fn mat_from_rows(rows: &[Vec<f64>]) -> Mat {
    let nr = rows.len();
    let nc = if nr == 0 { 0 } else { rows[0].len() };
    assert!(rows.iter().all(|r| r.len() == nc), "ragged rows");
    Mat::from_fn(nr, nc, |i, j| rows[i][j])
}

/// Matrix exponential by scaling and squaring with a Pade approximant.
///
/// Accurate to ~1e-12 relative error for the operator norms this crate
/// produces (well below the ~50 range where the scaling bound still holds).
pub fn mat_exp(f: &Mat) -> Result<Mat, LinopsError> {
    check_square_finite(f)?;
    Ok(f.clone().exp())
}

/// Spectral abscissa test: returns `(is_hurwitz, max real part of spectrum)`.
pub fn is_hurwitz(f: &Mat) -> Result<(bool, f64), LinopsError> {
    check_square_finite(f)?;
    let eigs = f.clone().complex_eigenvalues();
    let abscissa = eigs.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    Ok((abscissa < 0.0, abscissa))
}

/// Smallest and largest eigenvalue of a symmetric matrix.
///
/// The input must be symmetric to 1e-12 relative asymmetry; it is symmetrized
/// before factorization so roundoff-level asymmetry cannot leak in.
pub fn sym_eig_bounds(s: &Mat) -> Result<(f64, f64), LinopsError> {
    check_square_finite(s)?;
    let defect = (s - s.transpose()).norm();
    if defect > 1e-12 * s.norm().max(1.0) {
        return Err(LinopsError::NotSymmetric { defect });
    }
    let sym = (s + s.transpose()) * 0.5;
    let eigs = sym.symmetric_eigen().eigenvalues;
    let min = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = eigs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok((min, max))
}

/// Solves `P F + F^T P = -Q` for symmetric positive definite `P`.
///
/// Requires `F` Hurwitz and `Q` symmetric positive definite; under those
/// hypotheses the vectorized system is nonsingular and `P` is SPD. The
/// computed residual is checked against 1e-10 * |Q|.
pub fn solve_lyapunov(f: &Mat, q: &Mat) -> Result<Mat, LinopsError> {
    check_square_finite(f)?;
    check_square_finite(q)?;
    let n = f.nrows();
    if q.nrows() != n {
        return Err(LinopsError::Dimension(format!(
            "F is {n}x{n} but Q is {}x{}",
            q.nrows(),
            q.ncols()
        )));
    }
    let (hurwitz, abscissa) = is_hurwitz(f)?;
    if !hurwitz {
        return Err(LinopsError::NotHurwitz { abscissa });
    }
    let (q_min, _) = sym_eig_bounds(q)?;
    if q_min <= 0.0 {
        return Err(LinopsError::NotPositiveDefinite { min_eig: q_min });
    }

    let ft = f.transpose();
    let eye = Mat::identity(n, n);
    let system = ft.kronecker(&eye) + eye.kronecker(&ft);
    let rhs = DVector::from_column_slice((-q).as_slice());
    let sol = system
        .lu()
        .solve(&rhs)
        .ok_or(LinopsError::SolveFailed { residual: f64::NAN })?;
    let p = Mat::from_column_slice(n, n, sol.as_slice());
    let p = (&p + p.transpose()) * 0.5;

    let residual = (&p * f + ft * &p + q).norm();
    if residual > 1e-10 * q.norm() {
        return Err(LinopsError::SolveFailed { residual });
    }
    Ok(p)
}

/// Kalman rank test: `(A, B)` is controllable iff `[B, AB, ..., A^(n-1)B]`
/// has full row rank. Rank is judged from singular values with a tolerance
/// scaled by the largest singular value.
pub fn is_controllable(a: &Mat, b: &Mat) -> Result<bool, LinopsError> {
    check_square_finite(a)?;
    let n = a.nrows();
    if b.nrows() != n {
        return Err(LinopsError::Dimension(format!(
            "A is {n}x{n} but B has {} rows",
            b.nrows()
        )));
    }
    let m = b.ncols();
    let mut ctrb = Mat::zeros(n, n * m);
    let mut block = b.clone();
    for k in 0..n {
        ctrb.view_mut((0, k * m), (n, m)).copy_from(&block);
        block = a * block;
    }
    let svals = ctrb.singular_values();
    let smax = svals.iter().cloned().fold(0.0_f64, f64::max);
    let tol = smax * (n.max(n * m) as f64) * f64::EPSILON;
    let rank = svals.iter().filter(|&&s| s > tol).count();
    Ok(rank == n)
}
