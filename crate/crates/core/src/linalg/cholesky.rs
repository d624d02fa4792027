use super::matrix::Matrix;
use super::LinalgError;

/// Relative asymmetry accepted by [`cholesky`].
pub const SYMMETRY_TOL: f64 = 1e-9;

/// Lower-triangular `l` with `l * l^T = g`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    pub l: Matrix,
}

/// Cholesky factorization of a symmetric positive-definite matrix.
///
/// Pivots at or below `dim * eps * max(diag)` are treated as a loss of
/// definiteness, so numerically singular Gram matrices are reported rather
/// than factored into a near-infinite inverse.
pub fn cholesky(g: &Matrix) -> Result<CholeskyFactor, LinalgError> {
    if !g.is_square() || g.rows() == 0 {
        return Err(LinalgError::InvalidArgument(format!(
            "cholesky needs a non-empty square matrix, got {}x{}",
            g.rows(),
            g.cols()
        )));
    }
    if !g.is_finite() {
        return Err(LinalgError::NonFinite { context: "cholesky input".into() });
    }
    let asym = g.asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(LinalgError::NotSymmetric { asymmetry: asym });
    }
    let n = g.rows();
    let max_diag = (0..n).fold(0.0f64, |m, i| m.max(g[(i, i)]));
    let floor = n as f64 * f64::EPSILON * max_diag;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let lj = l.row(j)[..j].to_vec();
        let d = g[(j, j)] - lj.iter().map(|v| v * v).sum::<f64>();
        if !(d > floor) {
            return Err(LinalgError::NotPositiveDefinite { pivot: j, value: d });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let s: f64 = l.row(i)[..j].iter().zip(&lj).map(|(a, b)| a * b).sum();
            l[(i, j)] = (g[(i, j)] - s) / djj;
        }
    }
    Ok(CholeskyFactor { l })
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    /// Solves `l^T x = rhs` for every column of `rhs`.
    pub fn solve_lt(&self, rhs: &Matrix) -> Matrix {
        let n = self.dim();
        assert_eq!(rhs.rows(), n, "solve_lt shape mismatch");
        let mut x = rhs.clone();
        for c in 0..rhs.cols() {
            for i in (0..n).rev() {
                let mut s = x[(i, c)];
                for k in (i + 1)..n {
                    s -= self.l[(k, i)] * x[(k, c)];
                }
                x[(i, c)] = s / self.l[(i, i)];
            }
        }
        x
    }

    /// Solves `l x = rhs` for every column of `rhs`.
    pub fn solve_l(&self, rhs: &Matrix) -> Matrix {
        let n = self.dim();
        assert_eq!(rhs.rows(), n, "solve_l shape mismatch");
        let mut x = rhs.clone();
        for c in 0..rhs.cols() {
            for i in 0..n {
                let mut s = x[(i, c)];
                for k in 0..i {
                    s -= self.l[(i, k)] * x[(k, c)];
                }
                x[(i, c)] = s / self.l[(i, i)];
            }
        }
        x
    }

    /// `l * l^T`.
    pub fn reconstruct(&self) -> Matrix {
        self.l.matmul_t(&self.l)
    }
}
