//! Thin singular value decomposition by one-sided (Hestenes) Jacobi rotations.
//!
//! Tall inputs are first reduced by a Householder QR so the rotations run on
//! the small `c x c` triangular factor. Wide inputs are handled through the
//! transpose. The result is the thin factorization `u (p x q)`, `s (q)`,
//! `vt (q x c)` with `q = min(p, c)`.

use super::matrix::{dot, Matrix};
use super::LinalgError;

/// Default cap on Jacobi sweeps before reporting non-convergence.
pub const DEFAULT_MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactorization {
    /// Left singular vectors as columns, `p x q`.
    pub u: Matrix,
    /// Singular values, non-increasing.
    pub s: Vec<f64>,
    /// Right singular vectors as rows, `q x c`.
    pub vt: Matrix,
}

impl SvdFactorization {
    pub fn rank_bound(&self) -> usize {
        self.s.len()
    }

    /// `u * diag(s) * vt`.
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (v, s) in us.row_mut(i).iter_mut().zip(&self.s) {
                *v *= s;
            }
        }
        us.matmul(&self.vt)
    }

    /// Number of singular values strictly above `tol * s[0]`.
    pub fn numerical_rank(&self, tol: f64) -> usize {
        numerical_rank(&self.s, tol)
    }
}

/// Counts `s_i > tol * s_0`. A zero spectrum has rank zero.
pub fn numerical_rank(s: &[f64], tol: f64) -> usize {
    match s.first() {
        Some(&top) if top > 0.0 => s.iter().take_while(|&&v| v > tol * top).count(),
        _ => 0,
    }
}

/// SVD with the default sweep cap.
pub fn svd(m: &Matrix) -> Result<SvdFactorization, LinalgError> {
    svd_with_cap(m, DEFAULT_MAX_SWEEPS)
}

pub fn svd_with_cap(m: &Matrix, max_sweeps: usize) -> Result<SvdFactorization, LinalgError> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(LinalgError::InvalidArgument(format!(
            "svd of an empty {}x{} matrix",
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_finite() {
        return Err(LinalgError::NonFinite { context: "svd input".into() });
    }
    let mut f = if m.rows() >= m.cols() {
        tall_svd(m, max_sweeps)?
    } else {
        let t = tall_svd(&m.transpose(), max_sweeps).map_err(|e| match e {
            LinalgError::NoConvergence { sweeps, .. } => {
                LinalgError::NoConvergence { rows: m.rows(), cols: m.cols(), sweeps }
            }
            other => other,
        })?;
        SvdFactorization { u: t.vt.transpose(), s: t.s, vt: t.u.transpose() }
    };
    fix_signs(&mut f);
    Ok(f)
}

/// Flips each singular pair so the largest-magnitude entry of the left
/// vector is non-negative (first such entry on ties).
fn fix_signs(f: &mut SvdFactorization) {
    let (p, q) = f.u.shape();
    for j in 0..q {
        let mut best = 0;
        let mut best_abs = -1.0;
        for i in 0..p {
            let a = f.u[(i, j)].abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if f.u[(best, j)] < 0.0 {
            for i in 0..p {
                f.u[(i, j)] = -f.u[(i, j)];
            }
            for v in f.vt.row_mut(j) {
                *v = -*v;
            }
        }
    }
}

/// SVD for `rows >= cols`.
fn tall_svd(m: &Matrix, max_sweeps: usize) -> Result<SvdFactorization, LinalgError> {
    let (p, c) = m.shape();
    debug_assert!(p >= c);

    // Columns of the working matrix, stored contiguously.
    let (q_thin, mut cols) = if p > c {
        let (q, r) = householder_qr(m);
        (Some(q), transpose_to_columns(&r))
    } else {
        (None, transpose_to_columns(m))
    };
    let mut v: Vec<Vec<f64>> = (0..c)
        .map(|j| {
            let mut e = vec![0.0; c];
            e[j] = 1.0;
            e
        })
        .collect();

    let tol = 2.0 * f64::EPSILON;
    // Columns at rounding level of the whole matrix carry no information and
    // can rotate against each other indefinitely.
    let total: f64 = cols.iter().map(|col| dot(col, col)).sum();
    let negligible = (f64::EPSILON * f64::EPSILON) * total;
    let mut converged = c < 2;
    for _ in 0..max_sweeps {
        if converged {
            break;
        }
        let mut rotated = false;
        for i in 0..c - 1 {
            for j in (i + 1)..c {
                let (ci, cj) = pair_mut(&mut cols, i, j);
                let alpha = dot(ci, ci);
                let beta = dot(cj, cj);
                let gamma = dot(ci, cj);
                if alpha <= negligible || beta <= negligible || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                rotate(ci, cj, cs, sn);
                let (vi, vj) = pair_mut(&mut v, i, j);
                rotate(vi, vj, cs, sn);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(LinalgError::NoConvergence { rows: p, cols: c, sweeps: max_sweeps });
    }

    let norms: Vec<f64> = cols.iter().map(|col| dot(col, col).sqrt()).collect();
    let mut order: Vec<usize> = (0..c).collect();
    // Stable sort keeps the algorithm's order for tied values.
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap_or(std::cmp::Ordering::Equal));

    let work_rows = cols.first().map_or(0, |col| col.len());
    let mut u_work = Matrix::zeros(work_rows, c);
    let mut valid = vec![true; c];
    let mut s = Vec::with_capacity(c);
    let mut vt = Matrix::zeros(c, c);
    for (dst, &src) in order.iter().enumerate() {
        let sigma = norms[src];
        s.push(sigma);
        vt.row_mut(dst).copy_from_slice(&v[src]);
        if sigma * sigma > negligible && (1.0 / sigma).is_finite() {
            let inv = 1.0 / sigma;
            for (i, &val) in cols[src].iter().enumerate() {
                u_work[(i, dst)] = val * inv;
            }
        } else {
            valid[dst] = false;
        }
    }
    let mut u = match q_thin {
        Some(q) => q.matmul(&u_work),
        None => u_work,
    };
    if valid.iter().any(|ok| !ok) {
        complete_orthonormal_columns(&mut u, &mut valid);
    }
    Ok(SvdFactorization { u, s, vt })
}

fn transpose_to_columns(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.cols()).map(|j| m.col(j)).collect()
}

fn pair_mut(v: &mut [Vec<f64>], i: usize, j: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(i < j);
    let (head, tail) = v.split_at_mut(j);
    (&mut head[i], &mut tail[0])
}

#[inline]
fn rotate(a: &mut [f64], b: &mut [f64], cs: f64, sn: f64) {
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let xa = *x;
        let yb = *y;
        *x = cs * xa - sn * yb;
        *y = sn * xa + cs * yb;
    }
}

/// Thin Householder QR of a tall matrix: returns `q (p x c)` with orthonormal
/// columns and upper-triangular `r (c x c)`.
fn householder_qr(m: &Matrix) -> (Matrix, Matrix) {
    let (p, c) = m.shape();
    // Work column-major for cache-friendly reflector application.
    let mut a = transpose_to_columns(m);
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(c);
    for k in 0..c {
        let x = &a[k][k..];
        let norm_x = dot(x, x).sqrt();
        let mut v = x.to_vec();
        if norm_x == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        let alpha = if v[0] >= 0.0 { -norm_x } else { norm_x };
        v[0] -= alpha;
        let vnorm = dot(&v, &v).sqrt();
        if vnorm == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        v.iter_mut().for_each(|e| *e /= vnorm);
        for col in a.iter_mut().skip(k) {
            let seg = &mut col[k..];
            let proj = 2.0 * dot(&v, seg);
            for (s, vi) in seg.iter_mut().zip(&v) {
                *s -= proj * vi;
            }
        }
        reflectors.push(v);
    }
    let r = Matrix::from_fn(c, c, |i, j| if i <= j { a[j][i] } else { 0.0 });
    // Q = H_0 H_1 ... H_{c-1} applied to the first c unit vectors.
    let mut q_cols: Vec<Vec<f64>> = (0..c)
        .map(|j| {
            let mut e = vec![0.0; p];
            e[j] = 1.0;
            e
        })
        .collect();
    for (k, v) in reflectors.iter().enumerate().rev() {
        if v.is_empty() {
            continue;
        }
        for col in q_cols.iter_mut() {
            let seg = &mut col[k..];
            let proj = 2.0 * dot(v, seg);
            for (s, vi) in seg.iter_mut().zip(v) {
                *s -= proj * vi;
            }
        }
    }
    let q = Matrix::from_fn(p, c, |i, j| q_cols[j][i]);
    (q, r)
}

/// Replaces the columns flagged invalid with unit vectors orthogonal to all
/// valid columns, chosen greedily among the standard basis.
pub(crate) fn complete_orthonormal_columns(u: &mut Matrix, valid: &mut [bool]) {
    let p = u.rows();
    for j in 0..u.cols() {
        if valid[j] {
            continue;
        }
        let basis: Vec<Vec<f64>> =
            (0..u.cols()).filter(|&k| valid[k]).map(|k| u.col(k)).collect();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for e in 0..p {
            let mut cand = vec![0.0; p];
            cand[e] = 1.0;
            for _ in 0..2 {
                for b in &basis {
                    let proj = dot(b, &cand);
                    for (c, bv) in cand.iter_mut().zip(b) {
                        *c -= proj * bv;
                    }
                }
            }
            let nrm = dot(&cand, &cand).sqrt();
            if best.as_ref().is_none_or(|(bn, _)| nrm > *bn) {
                best = Some((nrm, cand));
            }
        }
        let (nrm, cand) = best.expect("non-empty row space");
        let unit: Vec<f64> = cand.iter().map(|c| c / nrm).collect();
        u.set_col(j, &unit);
        valid[j] = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Matrix::from_fn(rows, cols, |_, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    fn orthonormality_error(m: &Matrix) -> f64 {
        m.t_matmul(m).sub(&Matrix::identity(m.cols())).max_abs()
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let f = svd(&Matrix::identity(3)).unwrap();
        assert_eq!(f.s, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_gives_sorted_spectrum_and_signed_permutations() {
        let f = svd(&Matrix::diag(&[1.0, 3.0, 2.0])).unwrap();
        assert_eq!(f.s, vec![3.0, 2.0, 1.0]);
        for m in [&f.u, &f.vt] {
            for v in m.data() {
                assert!(*v == 0.0 || v.abs() == 1.0);
            }
        }
        assert!(f.reconstruct().sub(&Matrix::diag(&[1.0, 3.0, 2.0])).max_abs() < 1e-15);
    }

    #[test]
    fn tall_square_and_wide_reconstruct() {
        for (p, c) in [(6, 4), (4, 4), (3, 7), (40, 5), (1, 5), (5, 1)] {
            let m = lcg_matrix(p, c, (p * 31 + c) as u64);
            let f = svd(&m).unwrap();
            let q = p.min(c);
            assert_eq!(f.u.shape(), (p, q));
            assert_eq!(f.vt.shape(), (q, c));
            let err = f.reconstruct().sub(&m).frobenius_norm();
            assert!(err <= 1e-10 * m.frobenius_norm(), "{p}x{c}: {err}");
            assert!(orthonormality_error(&f.u) < 1e-10);
            assert!(orthonormality_error(&f.vt.transpose()) < 1e-10);
            assert!(f.s.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn rank_deficient_input_still_has_orthonormal_u() {
        // Two identical rows and a zero column.
        let m = Matrix::from_rows(&[[1.0, 2.0, 0.0], [1.0, 2.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        let f = svd(&m).unwrap();
        assert!(orthonormality_error(&f.u) < 1e-12);
        assert_eq!(f.numerical_rank(1e-10), 1);
        assert!(f.reconstruct().sub(&m).max_abs() < 1e-14);
    }

    #[test]
    fn zero_matrix() {
        let f = svd(&Matrix::zeros(3, 2)).unwrap();
        assert_eq!(f.s, vec![0.0, 0.0]);
        assert_eq!(f.numerical_rank(1e-10), 0);
        assert!(orthonormality_error(&f.u) < 1e-12);
    }

    #[test]
    fn sign_convention_is_applied() {
        let m = lcg_matrix(5, 3, 9);
        let f = svd(&m).unwrap();
        for j in 0..3 {
            let col = f.u.col(j);
            let big = col.iter().cloned().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            assert!(big >= 0.0);
        }
        // Same input, same bits.
        assert_eq!(f, svd(&m).unwrap());
    }

    #[test]
    fn sweep_cap_is_enforced() {
        let m = lcg_matrix(6, 6, 3);
        match svd_with_cap(&m, 1) {
            Err(LinalgError::NoConvergence { rows: 6, cols: 6, sweeps: 1 }) => {}
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn rejects_non_finite() {
        let mut m = Matrix::zeros(2, 2);
        m[(0, 1)] = f64::NAN;
        assert!(matches!(svd(&m), Err(LinalgError::NonFinite { .. })));
    }
}
