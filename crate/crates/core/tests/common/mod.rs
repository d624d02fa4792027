#![allow(dead_code)]

use molae::generate::{generate, random_matrix, GenConfig, ModelKind};
use molae::layer::{Differentiable, Gradients};
use molae::{Layer, Matrix, MoeLayer, MolaeLayer, OpMask};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

/// Singular values from nalgebra, descending.
pub fn oracle_singular_values(m: &Matrix) -> Vec<f64> {
    let mut s: Vec<f64> = to_na(m).singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s
}

pub fn tail_energy(s: &[f64], m: usize) -> f64 {
    s.iter().skip(m).map(|v| v * v).sum()
}

pub fn moe(n: usize, m: usize, e: usize, top_k: usize, seed: u64) -> MoeLayer {
    match generate(&GenConfig::new(ModelKind::Moe, n, m, e, top_k).seed(seed)).unwrap() {
        Layer::Moe(l) => l,
        Layer::Molae(_) => unreachable!(),
    }
}

pub fn planted(n: usize, m: usize, e: usize, top_k: usize, k: usize, seed: u64) -> MoeLayer {
    match generate(&GenConfig::new(ModelKind::Planted, n, m, e, top_k).group_size(k).seed(seed)).unwrap() {
        Layer::Moe(l) => l,
        Layer::Molae(_) => unreachable!(),
    }
}

pub fn molae(n: usize, m: usize, e: usize, top_k: usize, k: usize, mask: OpMask, seed: u64) -> MolaeLayer {
    let cfg = GenConfig::new(ModelKind::Molae, n, m, e, top_k).group_size(k).op_mask(mask).seed(seed);
    match generate(&cfg).unwrap() {
        Layer::Molae(l) => l,
        Layer::Moe(_) => unreachable!(),
    }
}

/// `ws[i] = A_i * B` with a shared `latent x n` factor.
pub fn planted_stack(rng: &mut ChaCha8Rng, g: usize, m: usize, n: usize, latent: usize) -> Vec<Matrix> {
    let b = random_matrix(rng, latent, n, n);
    (0..g).map(|_| gaussian(rng, m, latent).matmul(&b)).collect()
}

/// Gap between the k-th and (k+1)-th largest router logits; finite
/// differences are only meaningful when it is comfortably positive.
pub fn routing_margin(logits: &[f64], top_k: usize) -> f64 {
    if top_k >= logits.len() {
        return f64::INFINITY;
    }
    let mut sorted = logits.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sorted[top_k - 1] - sorted[top_k]
}

/// Max finite-difference error of the gradient of `<c, forward(x)>` over every
/// parameter and input entry, relative to the largest analytic entry.
pub fn fd_relative_error<L: Differentiable + Clone>(layer: &L, x: &[f64], c: &[f64], h: f64) -> f64 {
    let objective = |l: &L, x: &[f64]| -> f64 { l.forward(x).unwrap().iter().zip(c).map(|(y, c)| y * c).sum() };
    let mut tape = L::Tape::default();
    layer.forward_record(x, &mut tape).unwrap();
    let (dx, grads) = layer.backward(&tape, c).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.data().to_vec()).collect();

    let mut scale = dx.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for t in &analytic {
        scale = t.iter().fold(scale, |m, v| m.max(v.abs()));
    }
    let scale = scale.max(1e-12);
    let mut worst = 0.0f64;

    let count = analytic.len();
    for t in 0..count {
        for idx in 0..analytic[t].len() {
            let mut plus = layer.clone();
            plus.parameters_mut()[t].data_mut()[idx] += h;
            let mut minus = layer.clone();
            minus.parameters_mut()[t].data_mut()[idx] -= h;
            let fd = (objective(&plus, x) - objective(&minus, x)) / (2.0 * h);
            worst = worst.max((fd - analytic[t][idx]).abs() / scale);
        }
    }
    for j in 0..x.len() {
        let mut xp = x.to_vec();
        xp[j] += h;
        let mut xm = x.to_vec();
        xm[j] -= h;
        let fd = (objective(layer, &xp) - objective(layer, &xm)) / (2.0 * h);
        worst = worst.max((fd - dx[j]).abs() / scale);
    }
    worst
}

/// A probe whose routing margin exceeds `margin`, drawn from `rng`.
pub fn stable_probe(rng: &mut ChaCha8Rng, layer: &dyn molae::FfnLayer, margin: f64) -> Vec<f64> {
    loop {
        let x = gaussian_vec(rng, layer.hidden_dim());
        if routing_margin(&layer.router().logits(&x).unwrap(), layer.top_k()) > margin {
            return x;
        }
    }
}

pub const ALL_MASKS: [OpMask; 8] = [
    OpMask { up: false, gate: false, down: false },
    OpMask { up: true, gate: false, down: false },
    OpMask { up: false, gate: true, down: false },
    OpMask { up: false, gate: false, down: true },
    OpMask { up: true, gate: true, down: false },
    OpMask { up: true, gate: false, down: true },
    OpMask { up: false, gate: true, down: true },
    OpMask { up: true, gate: true, down: true },
];
