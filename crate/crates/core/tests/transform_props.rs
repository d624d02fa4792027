mod common;

use common::{gaussian, moe, oracle_singular_values, planted, planted_stack, rng, tail_energy};
use molae::linalg::DEFAULT_RANK_TOL;
use molae::transform::{
    check_exact_factorizability, collect_activations, factor_group, factor_group_input_aware, factor_group_refined,
    left_weighted_objective, right_weighted_objective, transform_layer, verify_equivalence, TransformMode,
    TransformOptions,
};
use molae::{FfnLayer, Matrix, OpMask, Operator};
use proptest::prelude::*;

fn stack_energy(ws: &[Matrix]) -> f64 {
    ws.iter().map(Matrix::frobenius_norm_sq).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn residual_is_stacked_tail_energy(g in 1usize..5, m in 1usize..8, n in 1usize..10, frac in 0.0f64..1.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let ws: Vec<Matrix> = (0..g).map(|_| gaussian(&mut r, m, n)).collect();
        let limit = (g * m).min(n);
        let latent = 1 + ((limit - 1) as f64 * frac) as usize;
        let f = factor_group(&ws, latent).unwrap();
        let expected = tail_energy(&oracle_singular_values(&Matrix::vstack(&ws).unwrap()), latent);
        prop_assert!((f.residual - expected).abs() <= 1e-8 * expected.max(1e-300) + 1e-12);
        let direct: f64 = ws.iter().enumerate().map(|(i, w)| w.sub(&f.composite(i)).frobenius_norm_sq()).sum();
        prop_assert!((direct - f.residual).abs() <= 1e-8 * (1.0 + f.residual));
    }

    #[test]
    fn residual_is_monotone_in_latent_dim(g in 1usize..4, m in 1usize..6, n in 2usize..9, seed in any::<u64>()) {
        let mut r = rng(seed);
        let ws: Vec<Matrix> = (0..g).map(|_| gaussian(&mut r, m, n)).collect();
        let limit = (g * m).min(n);
        let residuals: Vec<f64> = (1..=limit).map(|l| factor_group(&ws, l).unwrap().residual).collect();
        prop_assert!(residuals.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        prop_assert!(residuals[limit - 1] <= 1e-18 * stack_energy(&ws).max(1.0) + 1e-20);
    }

    #[test]
    fn composites_scale_linearly(g in 1usize..4, m in 1usize..6, n in 1usize..8, c in 0.01f64..100.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let ws: Vec<Matrix> = (0..g).map(|_| gaussian(&mut r, m, n)).collect();
        let latent = 1.max((g * m).min(n) / 2);
        let base = factor_group(&ws, latent).unwrap();
        let scaled_ws: Vec<Matrix> = ws.iter().map(|w| w.scale(c)).collect();
        let scaled = factor_group(&scaled_ws, latent).unwrap();
        for i in 0..g {
            let want = base.composite(i).scale(c);
            prop_assert!(scaled.composite(i).sub(&want).max_abs() <= 1e-8 * (1.0 + want.max_abs()));
        }
    }

    #[test]
    fn exactness_test_agrees_with_residual(g in 2usize..5, m in 2usize..6, n in 6usize..14, seed in any::<u64>()) {
        let mut r = rng(seed);
        let latent = m.min(n - 1);
        let ws = planted_stack(&mut r, g, m, n, latent);
        let fz = check_exact_factorizability(&ws, latent, DEFAULT_RANK_TOL).unwrap();
        let res = factor_group(&ws, latent).unwrap().residual;
        prop_assert!(fz.feasible);
        prop_assert_eq!(fz.common_nullity, n - latent);
        prop_assert!(res <= 1e-16 * stack_energy(&ws));

        let independent: Vec<Matrix> = (0..g).map(|_| gaussian(&mut r, m, n)).collect();
        let fz = check_exact_factorizability(&independent, latent, DEFAULT_RANK_TOL).unwrap();
        let res = factor_group(&independent, latent).unwrap().residual;
        let stacked_rank = (g * m).min(n);
        prop_assert_eq!(fz.feasible, stacked_rank <= latent);
        prop_assert_eq!(fz.feasible, res <= 1e-16 * stack_energy(&independent));
    }

    #[test]
    fn refined_never_loses_to_plain(g in 1usize..4, p in 2usize..6, n in 2usize..8, s in 1usize..12, seed in any::<u64>()) {
        let mut r = rng(seed);
        let ws: Vec<Matrix> = (0..g).map(|_| gaussian(&mut r, p, n)).collect();
        let latent = 1.max((g * p).min(n) - 1);
        let plain = factor_group(&ws, latent).unwrap();

        let xs: Vec<Matrix> = (0..g).map(|_| gaussian(&mut r, s + p, p)).collect();
        let left = factor_group_refined(&ws, &xs, latent, None).unwrap();
        let lo = left_weighted_objective(&ws, &xs, &left.a, &left.b).sqrt();
        let po = left_weighted_objective(&ws, &xs, &plain.a, &plain.b).sqrt();
        prop_assert!(lo <= po + 1e-8, "left {} vs plain {}", lo, po);

        let x = gaussian(&mut r, n, s + n);
        let right = factor_group_input_aware(&ws, &x, latent, None).unwrap();
        let ro = right_weighted_objective(&ws, &x, &right.a, &right.b).sqrt();
        let po = right_weighted_objective(&ws, &x, &plain.a, &plain.b).sqrt();
        prop_assert!(ro <= po + 1e-8, "right {} vs plain {}", ro, po);
    }
}

#[test]
fn refined_beats_random_perturbations() {
    let mut r = rng(11);
    for _ in 0..5 {
        let ws: Vec<Matrix> = (0..3).map(|_| gaussian(&mut r, 4, 7)).collect();
        let xs: Vec<Matrix> = (0..3).map(|_| gaussian(&mut r, 9, 4)).collect();
        let f = factor_group_refined(&ws, &xs, 3, None).unwrap();
        let best = left_weighted_objective(&ws, &xs, &f.a, &f.b);
        for _ in 0..100 {
            let a: Vec<Matrix> = f.a.iter().map(|a| a.add(&gaussian(&mut r, 4, 3).scale(1e-3))).collect();
            let b = f.b.add(&gaussian(&mut r, 3, 7).scale(1e-3));
            assert!(best <= left_weighted_objective(&ws, &xs, &a, &b) + 1e-12);
        }
    }
}

#[test]
fn regularized_objective_converges_as_lambda_shrinks() {
    let mut r = rng(12);
    let ws = vec![gaussian(&mut r, 5, 8), gaussian(&mut r, 5, 8)];
    let base = gaussian(&mut r, 12, 3);
    // Columns repeat, so every X_i^T X_i has rank 3 < 5.
    let xs: Vec<Matrix> = (0..2).map(|_| Matrix::from_fn(12, 5, |i, j| base[(i, j % 3)])).collect();
    let f = factor_group_refined(&ws, &xs, 4, None).unwrap();
    let lambda = f.lambda_used.expect("singular Gram must be regularized");
    assert!(f.a.iter().all(Matrix::is_finite) && f.b.is_finite());
    let at = |l: f64| {
        let f = factor_group_refined(&ws, &xs, 4, Some(l)).unwrap();
        left_weighted_objective(&ws, &xs, &f.a, &f.b)
    };
    let (o1, o2, o3) = (at(lambda), at(lambda / 100.0), at(lambda / 10_000.0));
    assert!((o1 - o3).abs() <= 0.01 * o3.max(1e-12), "{o1} vs {o3}");
    assert!((o2 - o3).abs() <= 0.01 * o3.max(1e-12));
}

#[test]
fn down_operator_orientation() {
    let src = moe(10, 4, 4, 2, 21);
    for k in [1, 2, 4] {
        let opts = TransformOptions { target_rank: Some(3), group_size: k, ..Default::default() };
        let (out, _) = transform_layer(&src, &opts, None).unwrap();
        if k == 1 {
            for i in 0..4 {
                let reduced = molae::linalg::low_rank_approx(&src.expert(i).w_down, 3).unwrap();
                let got = out.composite_operator(i, Operator::Down).unwrap();
                assert!(got.sub(&reduced).max_abs() < 1e-8);
            }
        }
        assert_eq!(out.groups()[0].b_down.as_ref().unwrap().shape(), (10, 4));
    }
}

#[test]
fn empty_mask_preserves_forward_bitwise() {
    let src = moe(16, 8, 6, 2, 22);
    let opts = TransformOptions { op_mask: OpMask::NONE, group_size: 3, ..Default::default() };
    let (out, report) = transform_layer(&src, &opts, None).unwrap();
    let stats = verify_equivalence(&src, &out, 32, 5).unwrap();
    assert_eq!(stats.max_rel, 0.0);
    assert_eq!(report.forward_deviation.unwrap().max_rel, 0.0);
}

#[test]
fn hybrid_masks_copy_dense_operators() {
    let src = moe(12, 4, 4, 1, 23);
    let opts = TransformOptions { op_mask: "gate,down".parse().unwrap(), group_size: 2, ..Default::default() };
    let (out, _) = transform_layer(&src, &opts, None).unwrap();
    for i in 0..4 {
        assert_eq!(out.dense_experts()[i].w_up.as_ref().unwrap(), &src.expert(i).w_up);
        assert!(out.dense_experts()[i].w_gate.is_none());
    }
    assert_eq!(out.router(), src.router());
}

#[test]
fn planted_layers_recover_only_at_true_grouping() {
    let src = planted(24, 6, 8, 2, 4, 24);
    let at = |k| transform_layer(&src, &TransformOptions::default().with_group_size(k), None).unwrap().1;
    let exact = at(4);
    assert!(exact.all_exact);
    assert!(exact.forward_deviation.unwrap().max_rel <= 1e-6);
    let two = at(2);
    assert!(two.all_exact);
    let merged = at(8);
    assert!(!merged.all_exact);
    assert!(merged.total_residual > exact.total_residual);
}

#[test]
fn activation_aware_mode_reports_calibration() {
    let src = moe(12, 4, 6, 2, 25);
    let acts = collect_activations(&src, 60, 3).unwrap();
    let opts = TransformOptions { mode: TransformMode::ActivationAware, group_size: 3, ..Default::default() };
    let (out, report) = transform_layer(&src, &opts, Some(&acts)).unwrap();
    assert_eq!(report.calibration_samples.as_ref().unwrap().iter().sum::<usize>(), 120);
    assert_eq!(out.expert_count(), 6);
    let json = serde_json::to_string(&report).unwrap();
    assert!(json.contains("\"mode\":\"activation-aware\""));
}
