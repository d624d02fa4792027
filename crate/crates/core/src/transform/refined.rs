//! Activation-aware factorization via Cholesky whitening.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::activation::gated;
use crate::error::{Error, Result};
use crate::layer::FfnLayer;
use crate::linalg::{cholesky, factor_balanced, residual_energy, svd, CholeskyFactor, LinalgError, Matrix};
use crate::moe::MoeLayer;

use super::factor::{check_same_shape, factor_group};

/// Calibration activations gathered per expert from routed inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    /// `hidden x s_i` inputs routed to expert `i`.
    pub inputs: Vec<Matrix>,
    /// `intermediate x s_i` gated activations of expert `i` on the same inputs.
    pub intermediates: Vec<Matrix>,
}

impl ActivationBatch {
    pub fn experts(&self) -> usize {
        self.inputs.len()
    }

    pub fn samples(&self, expert: usize) -> usize {
        self.inputs[expert].cols()
    }
}

/// Routes `samples` standard-normal probes through `src` and records, for
/// each expert, the inputs it was selected for and its gated activations.
pub fn collect_activations(src: &MoeLayer, samples: usize, seed: u64) -> Result<ActivationBatch> {
    let n = src.hidden_dim();
    let e = src.expert_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs: Vec<Vec<Vec<f64>>> = vec![Vec::new(); e];
    let mut hs: Vec<Vec<Vec<f64>>> = vec![Vec::new(); e];
    for _ in 0..samples {
        let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let decision = src.route(&x)?;
        for &i in &decision.indices {
            let ex = src.expert(i);
            let h = gated(src.activation(), &ex.w_up.matvec(&x), &ex.w_gate.matvec(&x));
            xs[i].push(x.clone());
            hs[i].push(h);
        }
    }
    let columns = |cols: &[Vec<f64>], rows: usize| Matrix::from_fn(rows, cols.len(), |r, c| cols[c][r]);
    Ok(ActivationBatch {
        inputs: xs.iter().map(|c| columns(c, n)).collect(),
        intermediates: hs.iter().map(|c| columns(c, src.intermediate_dim())).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedFactorization {
    pub a: Vec<Matrix>,
    pub b: Matrix,
    /// Regularization added to the Gram matrix, if the plain one was not
    /// positive definite.
    pub lambda_used: Option<f64>,
    /// Tail energy of the whitened spectrum; the minimized objective.
    pub weighted_residual: f64,
    /// Blocks whose activations were empty or zero and were matched unweighted.
    pub fallback_blocks: Vec<usize>,
}

impl RefinedFactorization {
    pub fn composite(&self, i: usize) -> Matrix {
        self.a[i].matmul(&self.b)
    }

    fn plain(ws: &[Matrix], m_latent: usize) -> Result<Self> {
        let f = factor_group(ws, m_latent)?;
        Ok(Self {
            a: f.a,
            b: f.b,
            lambda_used: None,
            weighted_residual: f.residual,
            fallback_blocks: (0..ws.len()).collect(),
        })
    }
}

/// Default regularization: `1e-6 * trace(G) / dim(G)`.
pub fn default_lambda(trace: f64, dim: usize) -> f64 {
    1e-6 * trace / dim as f64
}

/// Factors every block, retrying once with `G + lambda I` if any block is
/// not positive definite.
fn whiten(blocks: &[Matrix], lambda: Option<f64>) -> Result<(Vec<CholeskyFactor>, Option<f64>)> {
    let direct: std::result::Result<Vec<_>, LinalgError> = blocks.iter().map(cholesky).collect();
    match direct {
        Ok(ls) => Ok((ls, None)),
        Err(LinalgError::NotPositiveDefinite { .. }) => {
            let trace: f64 = blocks.iter().map(Matrix::trace).sum();
            let dim: usize = blocks.iter().map(Matrix::rows).sum();
            let lambda = lambda.unwrap_or_else(|| default_lambda(trace, dim));
            let ls = blocks
                .iter()
                .map(|g| cholesky(&g.add(&Matrix::identity(g.rows()).scale(lambda))))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|source| Error::Regularization { lambda, source })?;
            Ok((ls, Some(lambda)))
        }
        Err(e) => Err(e.into()),
    }
}

/// Minimizes `sum_i ||X_i (W_i - A_i B)||_F^2`, with `xs[i]` of shape
/// `s_i x rows(W_i)`.
///
/// The Gram matrix is block diagonal, `G = diag(X_i^T X_i) = L L^T`; the
/// leading `m_latent` triplets of `L^T W` give `A = L^{-T} U S^{1/2}` and
/// `B = S^{1/2} V^T`. An expert with no activation energy contributes an
/// identity block scaled to the mean of the others; if no expert has any,
/// the plain factorization is returned.
pub fn factor_group_refined(
    ws: &[Matrix],
    xs: &[Matrix],
    m_latent: usize,
    lambda: Option<f64>,
) -> Result<RefinedFactorization> {
    let (p, n) = check_same_shape(ws)?;
    if xs.len() != ws.len() {
        return Err(Error::arg(format!("{} activation blocks for {} experts", xs.len(), ws.len())));
    }
    for (i, x) in xs.iter().enumerate() {
        if x.cols() != p {
            return Err(Error::Shape { what: format!("activation block {i}"), expected: (x.rows(), p), found: x.shape() });
        }
    }
    let limit = (ws.len() * p).min(n);
    if m_latent == 0 || m_latent > limit {
        return Err(Error::arg(format!("latent dimension {m_latent} outside 1..={limit}")));
    }
    let mut blocks: Vec<Matrix> = xs.iter().map(Matrix::gram_cols).collect();
    let fallback: Vec<usize> = (0..blocks.len()).filter(|&i| !(blocks[i].trace() > 0.0)).collect();
    if fallback.len() == blocks.len() {
        return RefinedFactorization::plain(ws, m_latent);
    }
    let live = blocks.len() - fallback.len();
    let mean_diag = blocks.iter().map(Matrix::trace).sum::<f64>() / (live * p) as f64;
    for &i in &fallback {
        blocks[i] = Matrix::identity(p).scale(mean_diag);
    }
    let (ls, lambda_used) = whiten(&blocks, lambda)?;
    let weighted: Vec<Matrix> = ls.iter().zip(ws).map(|(l, w)| l.l.t_matmul(w)).collect();
    let f = svd(&Matrix::vstack(&weighted)?)?;
    let (a_tilde, b) = factor_balanced(&f, m_latent)?;
    let a = a_tilde.split_rows(p).iter().zip(&ls).map(|(at, l)| l.solve_lt(at)).collect();
    Ok(RefinedFactorization {
        a,
        b,
        lambda_used,
        weighted_residual: residual_energy(&f.s, m_latent),
        fallback_blocks: fallback,
    })
}

/// Minimizes `sum_i ||(W_i - A_i B) X||_F^2` for inputs `x` (`n x s`) shared
/// by the whole group.
///
/// With `X X^T = L L^T`, the leading triplets of `W L` give `A = U S^{1/2}` and
/// `B = S^{1/2} V^T L^{-1}`. Zero activations fall back to the plain factorization.
pub fn factor_group_input_aware(
    ws: &[Matrix],
    x: &Matrix,
    m_latent: usize,
    lambda: Option<f64>,
) -> Result<RefinedFactorization> {
    let (p, n) = check_same_shape(ws)?;
    if x.rows() != n {
        return Err(Error::Shape { what: "group activations".into(), expected: (n, x.cols()), found: x.shape() });
    }
    let limit = (ws.len() * p).min(n);
    if m_latent == 0 || m_latent > limit {
        return Err(Error::arg(format!("latent dimension {m_latent} outside 1..={limit}")));
    }
    let g = x.gram_rows();
    if !(g.trace() > 0.0) {
        return RefinedFactorization::plain(ws, m_latent);
    }
    let (mut ls, lambda_used) = whiten(std::slice::from_ref(&g), lambda)?;
    let l = ls.pop().expect("one block");
    let f = svd(&Matrix::vstack(ws)?.matmul(&l.l))?;
    let (a, b_tilde) = factor_balanced(&f, m_latent)?;
    let b = l.solve_lt(&b_tilde.transpose()).transpose();
    Ok(RefinedFactorization {
        a: a.split_rows(p),
        b,
        lambda_used,
        weighted_residual: residual_energy(&f.s, m_latent),
        fallback_blocks: Vec::new(),
    })
}

/// `sum_i ||X_i (W_i - A_i B)||_F^2`
pub fn left_weighted_objective(ws: &[Matrix], xs: &[Matrix], a: &[Matrix], b: &Matrix) -> f64 {
    ws.iter().zip(xs).zip(a).map(|((w, x), a)| x.matmul(&w.sub(&a.matmul(b))).frobenius_norm_sq()).sum()
}

/// `sum_i ||(W_i - A_i B) X||_F^2`
pub fn right_weighted_objective(ws: &[Matrix], x: &Matrix, a: &[Matrix], b: &Matrix) -> f64 {
    ws.iter().zip(a).map(|(w, a)| w.sub(&a.matmul(b)).matmul(x).frobenius_norm_sq()).sum()
}

/// Columns of `blocks` side by side.
pub(crate) fn hcat(rows: usize, blocks: &[&Matrix]) -> Matrix {
    let cols: usize = blocks.iter().map(|b| b.cols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut at = 0;
    for b in blocks {
        for r in 0..rows {
            out.row_mut(r)[at..at + b.cols()].copy_from_slice(b.row(r));
        }
        at += b.cols();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::random_matrix;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn identity_gram_matches_plain() {
        let mut r = rng(1);
        let ws: Vec<Matrix> = (0..3).map(|_| random_matrix(&mut r, 4, 6, 6)).collect();
        let xs = vec![Matrix::identity(4); 3];
        let refined = factor_group_refined(&ws, &xs, 3, None).unwrap();
        let plain = factor_group(&ws, 3).unwrap();
        for i in 0..3 {
            assert!(refined.composite(i).sub(&plain.composite(i)).max_abs() < 1e-8);
        }
        assert_eq!(refined.lambda_used, None);
        let input = factor_group_input_aware(&ws, &Matrix::identity(6), 3, None).unwrap();
        for i in 0..3 {
            assert!(input.composite(i).sub(&plain.composite(i)).max_abs() < 1e-8);
        }
    }

    #[test]
    fn refined_beats_plain_on_its_objective() {
        let mut r = rng(2);
        let ws: Vec<Matrix> = (0..2).map(|_| random_matrix(&mut r, 5, 7, 7)).collect();
        let xs: Vec<Matrix> = (0..2).map(|_| random_matrix(&mut r, 12, 5, 1)).collect();
        let refined = factor_group_refined(&ws, &xs, 4, None).unwrap();
        let plain = factor_group(&ws, 4).unwrap();
        let ro = left_weighted_objective(&ws, &xs, &refined.a, &refined.b);
        let po = left_weighted_objective(&ws, &xs, &plain.a, &plain.b);
        assert!(ro <= po + 1e-8, "{ro} > {po}");
        assert!((ro - refined.weighted_residual).abs() < 1e-8 * (1.0 + ro));

        let x = random_matrix(&mut r, 7, 20, 1);
        let input = factor_group_input_aware(&ws, &x, 4, None).unwrap();
        let io = right_weighted_objective(&ws, &x, &input.a, &input.b);
        assert!(io <= right_weighted_objective(&ws, &x, &plain.a, &plain.b) + 1e-8);
        assert!((io - input.weighted_residual).abs() < 1e-8 * (1.0 + io));
    }

    #[test]
    fn singular_gram_is_regularized() {
        let mut r = rng(3);
        let ws = vec![random_matrix(&mut r, 4, 6, 6)];
        let base = random_matrix(&mut r, 10, 2, 1);
        let x = Matrix::from_fn(10, 4, |i, j| base[(i, j % 2)]);
        let f = factor_group_refined(&ws, std::slice::from_ref(&x), 2, None).unwrap();
        assert!(f.lambda_used.unwrap() > 0.0);
        assert!(f.b.is_finite() && f.a[0].is_finite());
        let err = factor_group_refined(&ws, &[x], 2, Some(0.0)).unwrap_err();
        assert!(matches!(err, Error::Regularization { lambda, .. } if lambda == 0.0));
    }

    #[test]
    fn empty_blocks_fall_back() {
        let mut r = rng(4);
        let ws: Vec<Matrix> = (0..2).map(|_| random_matrix(&mut r, 3, 5, 5)).collect();
        let xs = vec![random_matrix(&mut r, 8, 3, 1), Matrix::zeros(0, 3)];
        let f = factor_group_refined(&ws, &xs, 3, None).unwrap();
        assert_eq!(f.fallback_blocks, vec![1]);
        let none = factor_group_refined(&ws, &[Matrix::zeros(0, 3), Matrix::zeros(0, 3)], 3, None).unwrap();
        assert_eq!(none.fallback_blocks, vec![0, 1]);
        assert_eq!(none.b, factor_group(&ws, 3).unwrap().b);
    }

    #[test]
    fn collects_routed_activations() {
        let layer = crate::generate::generate(&crate::generate::GenConfig::new(
            crate::generate::ModelKind::Moe,
            6,
            3,
            4,
            2,
        ))
        .unwrap();
        let crate::layer::Layer::Moe(l) = layer else { unreachable!() };
        let acts = collect_activations(&l, 50, 9).unwrap();
        let total: usize = (0..4).map(|i| acts.samples(i)).sum();
        assert_eq!(total, 100);
        assert_eq!(acts.intermediates[2].shape(), (3, acts.samples(2)));
        assert_eq!(acts, collect_activations(&l, 50, 9).unwrap());
    }

    #[test]
    fn hcat_places_blocks() {
        let a = Matrix::from_rows(&[[1.0], [2.0]]);
        let b = Matrix::from_rows(&[[3.0, 4.0], [5.0, 6.0]]);
        assert_eq!(hcat(2, &[&a, &b]), Matrix::from_rows(&[[1.0, 3.0, 4.0], [2.0, 5.0, 6.0]]));
    }
}
