use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{factor_balanced, numerical_rank, residual_energy, svd, truncate, Matrix};

/// Shared projection `b` and per-expert maps `a[i]` with `ws[i] ~ a[i] * b`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupFactorization {
    pub a: Vec<Matrix>,
    pub b: Matrix,
    /// `sum_{i >= m} s_i^2` of the stacked spectrum.
    pub residual: f64,
    /// Singular values of the stacked matrix, descending.
    pub spectrum: Vec<f64>,
}

impl GroupFactorization {
    pub fn composite(&self, i: usize) -> Matrix {
        self.a[i].matmul(&self.b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Factorizability {
    pub feasible: bool,
    pub common_nullity: usize,
}

pub(crate) fn check_same_shape(ws: &[Matrix]) -> Result<(usize, usize)> {
    let first = ws.first().ok_or_else(|| Error::arg("empty list of expert matrices"))?;
    for (i, w) in ws.iter().enumerate() {
        if w.shape() != first.shape() {
            return Err(Error::Shape { what: format!("expert matrix {i}"), expected: first.shape(), found: w.shape() });
        }
    }
    Ok(first.shape())
}

/// Best rank-`r` approximation of each matrix.
pub fn rank_reduce_experts(ws: &[Matrix], r: usize) -> Result<Vec<Matrix>> {
    ws.iter().map(|w| Ok(truncate(&svd(w)?, r)?.reconstruct())).collect()
}

/// Stacks `ws` vertically and splits the rank-`m_latent` truncation of the
/// stack into per-expert row blocks and one shared right factor.
pub fn factor_group(ws: &[Matrix], m_latent: usize) -> Result<GroupFactorization> {
    let (p, n) = check_same_shape(ws)?;
    let limit = (ws.len() * p).min(n);
    if m_latent == 0 || m_latent > limit {
        return Err(Error::arg(format!("latent dimension {m_latent} outside 1..={limit}")));
    }
    let stack = Matrix::vstack(ws)?;
    let f = svd(&stack)?;
    let (a, b) = factor_balanced(&f, m_latent)?;
    Ok(GroupFactorization { a: a.split_rows(p), b, residual: residual_energy(&f.s, m_latent), spectrum: f.s })
}

/// A zero-residual factorization through a rank-`m_latent` shared projection
/// exists exactly when the experts' kernels share a subspace of dimension
/// at least `n - m_latent`.
pub fn check_exact_factorizability(ws: &[Matrix], m_latent: usize, tol: f64) -> Result<Factorizability> {
    let (_, n) = check_same_shape(ws)?;
    let f = svd(&Matrix::vstack(ws)?)?;
    Ok(factorizability_from_spectrum(&f.s, n, m_latent, tol))
}

pub(crate) fn factorizability_from_spectrum(s: &[f64], n: usize, m_latent: usize, tol: f64) -> Factorizability {
    let common_nullity = n - numerical_rank(s, tol);
    Factorizability { feasible: common_nullity + m_latent >= n, common_nullity }
}
