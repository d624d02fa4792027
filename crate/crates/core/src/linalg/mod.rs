//! Dense kernels the transformation is built on: SVD, truncation and
//! balanced splitting, Cholesky, nullspace analysis.

mod cholesky;
mod matrix;
mod svd;

pub use cholesky::{cholesky, CholeskyFactor, SYMMETRY_TOL};
pub use matrix::{dot, norm, Matrix};
pub use svd::{numerical_rank, svd, svd_with_cap, SvdFactorization, DEFAULT_MAX_SWEEPS};

use thiserror::Error;

/// Default relative threshold for numerical rank: `s_i > tol * s_0`.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("svd of {rows}x{cols} matrix did not converge after {sweeps} sweeps")]
    NoConvergence { rows: usize, cols: usize, sweeps: usize },
    #[error("matrix is not positive definite (pivot {pivot} = {value:e}); regularize and retry")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("matrix is not symmetric (relative asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("rank {requested} out of range 1..={available}")]
    InvalidRank { requested: usize, available: usize },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("{0}")]
    InvalidArgument(String),
}

/// Leading `m` singular triplets.
pub fn truncate(f: &SvdFactorization, m: usize) -> Result<SvdFactorization, LinalgError> {
    check_rank(m, f.rank_bound())?;
    Ok(SvdFactorization {
        u: f.u.leading_cols(m),
        s: f.s[..m].to_vec(),
        vt: f.vt.leading_rows(m),
    })
}

/// Best rank-`r` approximation in Frobenius norm.
pub fn low_rank_approx(w: &Matrix, r: usize) -> Result<Matrix, LinalgError> {
    let f = svd(w)?;
    Ok(truncate(&f, r)?.reconstruct())
}

/// Splits the rank-`m` truncation evenly: `a = U_m S_m^{1/2}`, `b = S_m^{1/2} V_m^T`.
pub fn factor_balanced(f: &SvdFactorization, m: usize) -> Result<(Matrix, Matrix), LinalgError> {
    let t = truncate(f, m)?;
    let roots: Vec<f64> = t.s.iter().map(|s| s.sqrt()).collect();
    let mut a = t.u;
    for i in 0..a.rows() {
        for (v, r) in a.row_mut(i).iter_mut().zip(&roots) {
            *v *= r;
        }
    }
    let mut b = t.vt;
    for (i, r) in roots.iter().enumerate() {
        b.row_mut(i).iter_mut().for_each(|v| *v *= r);
    }
    Ok((a, b))
}

/// Squared Frobenius error of the rank-`m` truncation: `sum_{i >= m} s_i^2`.
pub fn residual_energy(s: &[f64], m: usize) -> f64 {
    s.iter().skip(m).fold(0.0, |acc, v| acc + v * v)
}

/// Orthonormal basis of `ker(w)` as columns (`cols x k`).
///
/// Right singular vectors whose singular value is at most `tol * s_0` are
/// taken as null directions; a zero matrix is entirely null.
pub fn nullspace_basis(w: &Matrix, tol: f64) -> Result<Matrix, LinalgError> {
    let n = w.cols();
    // Pad wide inputs to square so the full right basis is available.
    let f = if w.rows() < n { svd(&w.zero_padded(n, n))? } else { svd(w)? };
    let rank = f.numerical_rank(tol);
    Ok(Matrix::from_fn(n, n - rank, |i, j| f.vt[(rank + j, i)]))
}

/// `n - rank(stack(ws))`: dimension of the common kernel of all `ws`.
pub fn common_nullspace_dim(ws: &[Matrix], tol: f64) -> Result<usize, LinalgError> {
    if ws.is_empty() {
        return Err(LinalgError::InvalidArgument("common_nullspace_dim of an empty list".into()));
    }
    let stack = Matrix::vstack(ws)?;
    let n = stack.cols();
    let f = svd(&stack)?;
    Ok(n - f.numerical_rank(tol))
}

fn check_rank(m: usize, available: usize) -> Result<(), LinalgError> {
    if m == 0 || m > available {
        Err(LinalgError::InvalidRank { requested: m, available })
    } else {
        Ok(())
    }
}
