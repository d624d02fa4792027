//! Conversion of standard MoE layers into latent-expert layers.
//!
//! Each operator in the op-mask is handled per group of `k` consecutive
//! experts: optional per-expert rank reduction, then a shared factorization of
//! the stacked operators. Down operators are factored in transposed form so the
//! shared factor sits on the output side.

mod factor;
mod refined;
mod verify;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

pub use factor::{check_exact_factorizability, factor_group, rank_reduce_experts, Factorizability, GroupFactorization};
pub use refined::{
    collect_activations, default_lambda, factor_group_input_aware, factor_group_refined, left_weighted_objective,
    right_weighted_objective, ActivationBatch, RefinedFactorization,
};
pub use verify::{verify_equivalence, DeviationStats};

use crate::error::{Error, Result};
use crate::latent::{group_count, group_members, DenseOperators, LatentExpert, LatentGroup, MolaeConfig, MolaeLayer, OpMask, Operator};
use crate::layer::FfnLayer;
use crate::linalg::{residual_energy, svd, Matrix, DEFAULT_RANK_TOL};
use crate::moe::MoeLayer;

use factor::factorizability_from_spectrum;
use refined::hcat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformMode {
    #[default]
    Plain,
    ActivationAware,
}

impl fmt::Display for TransformMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransformMode::Plain => "plain",
            TransformMode::ActivationAware => "activation-aware",
        })
    }
}

impl FromStr for TransformMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "plain" => Ok(TransformMode::Plain),
            "activation-aware" => Ok(TransformMode::ActivationAware),
            other => Err(format!("unknown mode `{other}` (expected plain or activation-aware)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformOptions {
    /// Rank of the shared projections; defaults to the intermediate dimension.
    /// Smaller values are zero-padded to the layer's shapes.
    pub latent_dim: Option<usize>,
    /// Per-expert rank reduction before factoring; `None` keeps full rank.
    pub target_rank: Option<usize>,
    pub group_size: usize,
    pub op_mask: OpMask,
    pub mode: TransformMode,
    /// Regularization used when a Gram matrix is singular; `None` picks
    /// `1e-6 * trace(G) / dim(G)`.
    pub lambda: Option<f64>,
    /// Relative singular-value threshold for rank and nullity.
    pub rank_tol: f64,
    /// Probes for the forward-deviation summary; zero skips it.
    pub probes: usize,
    pub probe_seed: u64,
}

impl Default for TransformOptions {
    fn default() -> Self {
        Self {
            latent_dim: None,
            target_rank: None,
            group_size: 1,
            op_mask: OpMask::ALL,
            mode: TransformMode::Plain,
            lambda: None,
            rank_tol: DEFAULT_RANK_TOL,
            probes: 64,
            probe_seed: 0,
        }
    }
}

impl TransformOptions {
    pub fn with_group_size(mut self, k: usize) -> Self {
        self.group_size = k;
        self
    }

    fn latent_dim_for(&self, src: &MoeLayer) -> usize {
        self.latent_dim.unwrap_or(src.intermediate_dim())
    }

    pub fn validate(&self, src: &MoeLayer) -> Result<()> {
        let (n, m, e) = (src.hidden_dim(), src.intermediate_dim(), src.expert_count());
        if self.group_size == 0 || self.group_size > e {
            return Err(Error::arg(format!("group size {} outside 1..={e}", self.group_size)));
        }
        let latent = self.latent_dim_for(src);
        if latent == 0 || latent > m {
            return Err(Error::arg(format!("latent dimension {latent} outside 1..={m}")));
        }
        if let Some(r) = self.target_rank {
            let cap = latent.min(n);
            if r == 0 || r > cap {
                return Err(Error::arg(format!("target rank {r} outside 1..={cap}")));
            }
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::arg(format!("lambda must be a finite non-negative number, got {l}")));
            }
        }
        if !(self.rank_tol > 0.0 && self.rank_tol < 1.0) {
            return Err(Error::arg(format!("rank tolerance {} outside (0, 1)", self.rank_tol)));
        }
        Ok(())
    }
}

/// Outcome for one `(group, operator)` pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupReport {
    pub group: usize,
    pub operator: Operator,
    /// First expert and one past the last.
    pub experts: [usize; 2],
    /// Rank actually used: `min(latent_dim, g * m, n)`.
    pub latent_dim: usize,
    /// `||W - A B||_F^2` over the (rank-reduced) stack.
    pub residual: f64,
    pub relative_residual: f64,
    pub stack_energy: f64,
    /// Squared singular values kept / dropped by a rank-`latent_dim` truncation.
    pub retained_energy: f64,
    pub discarded_energy: f64,
    /// Energy removed by per-expert rank reduction.
    pub rank_reduction_energy: f64,
    /// Whether a zero-residual factorization exists at this latent dimension.
    pub exact: bool,
    pub common_nullity: usize,
    pub weighted_residual: Option<f64>,
    pub lambda_used: Option<f64>,
    /// Experts whose activations were empty and were factored unweighted.
    pub fallback_experts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransformReport {
    pub mode: TransformMode,
    pub hidden: usize,
    pub intermediate: usize,
    pub experts: usize,
    pub top_k: usize,
    pub group_size: usize,
    pub groups: usize,
    pub latent_dim: usize,
    pub target_rank: Option<usize>,
    pub op_mask: String,
    pub lambda: Option<f64>,
    pub rank_tol: f64,
    pub entries: Vec<GroupReport>,
    pub total_residual: f64,
    pub total_energy: f64,
    pub relative_residual: f64,
    pub all_exact: bool,
    /// Routed calibration samples per expert, activation-aware mode only.
    pub calibration_samples: Option<Vec<usize>>,
    pub forward_deviation: Option<DeviationStats>,
}

struct JobOutput {
    /// Per-expert maps, already in layer orientation and padded to `m x m`.
    a: Vec<Matrix>,
    b: Matrix,
    report: GroupReport,
}

fn operator_stack(src: &MoeLayer, members: std::ops::Range<usize>, op: Operator) -> Vec<Matrix> {
    members
        .map(|i| {
            let e = src.expert(i);
            match op {
                Operator::Up => e.w_up.clone(),
                Operator::Gate => e.w_gate.clone(),
                Operator::Down => e.w_down.transpose(),
            }
        })
        .collect()
}

fn run_job(
    src: &MoeLayer,
    opts: &TransformOptions,
    acts: Option<&ActivationBatch>,
    group: usize,
    op: Operator,
) -> Result<JobOutput> {
    let (n, m, e) = (src.hidden_dim(), src.intermediate_dim(), src.expert_count());
    let latent = opts.latent_dim_for(src);
    let members = group_members(group, opts.group_size, e);
    let original = operator_stack(src, members.clone(), op);
    let (ws, rank_reduction_energy) = match opts.target_rank {
        Some(r) => {
            let reduced = rank_reduce_experts(&original, r)?;
            let lost = original.iter().zip(&reduced).map(|(w, v)| w.sub(v).frobenius_norm_sq()).sum();
            (reduced, lost)
        }
        None => (original, 0.0),
    };
    let m_eff = latent.min(ws.len() * m).min(n);
    let stack_energy: f64 = ws.iter().map(Matrix::frobenius_norm_sq).sum();

    let (a, b, spectrum, weighted_residual, lambda_used, fallback) = match (opts.mode, acts) {
        (TransformMode::Plain, _) => {
            let f = factor_group(&ws, m_eff)?;
            (f.a, f.b, f.spectrum, None, None, Vec::new())
        }
        (TransformMode::ActivationAware, Some(acts)) => {
            let r = match op {
                Operator::Down => {
                    let xs: Vec<Matrix> = members.clone().map(|i| acts.intermediates[i].transpose()).collect();
                    factor_group_refined(&ws, &xs, m_eff, opts.lambda)?
                }
                Operator::Up | Operator::Gate => {
                    let blocks: Vec<&Matrix> = members.clone().map(|i| &acts.inputs[i]).collect();
                    factor_group_input_aware(&ws, &hcat(n, &blocks), m_eff, opts.lambda)?
                }
            };
            let spectrum = svd(&Matrix::vstack(&ws)?)?.s;
            let fallback = r.fallback_blocks.iter().map(|j| members.start + j).collect();
            (r.a, r.b, spectrum, Some(r.weighted_residual), r.lambda_used, fallback)
        }
        (TransformMode::ActivationAware, None) => {
            return Err(Error::arg("activation-aware mode needs calibration activations"));
        }
    };

    let residual = match opts.mode {
        TransformMode::Plain => residual_energy(&spectrum, m_eff),
        TransformMode::ActivationAware => ws.iter().zip(&a).map(|(w, a)| w.sub(&a.matmul(&b)).frobenius_norm_sq()).sum(),
    };
    let discarded = residual_energy(&spectrum, m_eff);
    let retained = spectrum.iter().take(m_eff).map(|s| s * s).sum();
    let fz = factorizability_from_spectrum(&spectrum, n, latent, opts.rank_tol);

    let (a, b) = match op {
        Operator::Up | Operator::Gate => (a.iter().map(|a| a.zero_padded(m, m)).collect(), b.zero_padded(m, n)),
        Operator::Down => {
            (a.iter().map(|a| a.zero_padded(m, m).transpose()).collect(), b.zero_padded(m, n).transpose())
        }
    };
    Ok(JobOutput {
        a,
        b,
        report: GroupReport {
            group,
            operator: op,
            experts: [members.start, members.end],
            latent_dim: m_eff,
            residual,
            relative_residual: if stack_energy > 0.0 { residual / stack_energy } else { 0.0 },
            stack_energy,
            retained_energy: retained,
            discarded_energy: discarded,
            rank_reduction_energy,
            exact: fz.feasible,
            common_nullity: fz.common_nullity,
            weighted_residual,
            lambda_used,
            fallback_experts: fallback,
        },
    })
}

/// Converts `src` into a latent-expert layer. Operators outside the op-mask
/// are copied dense, the router is copied unchanged, and any failure aborts
/// the whole conversion.
pub fn transform_layer(
    src: &MoeLayer,
    opts: &TransformOptions,
    acts: Option<&ActivationBatch>,
) -> Result<(MolaeLayer, TransformReport)> {
    opts.validate(src)?;
    let (e, m) = (src.expert_count(), src.intermediate_dim());
    match (opts.mode, acts) {
        (TransformMode::Plain, Some(_)) => return Err(Error::arg("plain mode takes no calibration activations")),
        (TransformMode::ActivationAware, None) => {
            return Err(Error::arg("activation-aware mode needs calibration activations"))
        }
        (TransformMode::ActivationAware, Some(a)) => {
            if a.experts() != e {
                return Err(Error::arg(format!("activations for {} experts, layer has {e}", a.experts())));
            }
            for i in 0..e {
                check_block(&a.inputs[i], src.hidden_dim(), &a.intermediates[i], m, i)?;
            }
        }
        (TransformMode::Plain, None) => {}
    }

    let config = MolaeConfig::from_moe(src.config(), opts.group_size, opts.op_mask);
    let groups = group_count(e, opts.group_size);
    let jobs: Vec<(usize, Operator)> =
        (0..groups).flat_map(|g| opts.op_mask.ops().map(move |op| (g, op))).collect();
    let outputs: Vec<JobOutput> =
        jobs.par_iter().map(|&(g, op)| run_job(src, opts, acts, g, op)).collect::<Result<_>>()?;

    let mut latent_groups = vec![LatentGroup::default(); groups];
    let mut latent_experts = vec![LatentExpert::default(); e];
    let mut dense = vec![DenseOperators::default(); e];
    for (i, d) in dense.iter_mut().enumerate() {
        let ex = src.expert(i);
        for op in Operator::ALL.into_iter().filter(|&op| !opts.op_mask.contains(op)) {
            d.set(
                op,
                Some(match op {
                    Operator::Up => ex.w_up.clone(),
                    Operator::Gate => ex.w_gate.clone(),
                    Operator::Down => ex.w_down.clone(),
                }),
            );
        }
    }
    let mut entries = Vec::with_capacity(outputs.len());
    for out in outputs {
        let r = out.report;
        latent_groups[r.group].set(r.operator, Some(out.b));
        for (i, a) in (r.experts[0]..r.experts[1]).zip(out.a) {
            latent_experts[i].set(r.operator, Some(a));
        }
        entries.push(r);
    }
    let layer = MolaeLayer::new(config, latent_groups, latent_experts, dense, src.router().clone())?;

    let total_residual = entries.iter().fold(0.0, |acc, r| acc + r.residual);
    let total_energy = entries.iter().fold(0.0, |acc, r| acc + r.stack_energy);
    let forward_deviation =
        if opts.probes > 0 { Some(verify_equivalence(src, &layer, opts.probes, opts.probe_seed)?) } else { None };
    let report = TransformReport {
        mode: opts.mode,
        hidden: src.hidden_dim(),
        intermediate: m,
        experts: e,
        top_k: src.top_k(),
        group_size: opts.group_size,
        groups,
        latent_dim: opts.latent_dim_for(src),
        target_rank: opts.target_rank,
        op_mask: opts.op_mask.to_string(),
        lambda: opts.lambda,
        rank_tol: opts.rank_tol,
        all_exact: entries.iter().all(|r| r.exact),
        entries,
        total_residual,
        total_energy,
        relative_residual: if total_energy > 0.0 { total_residual / total_energy } else { 0.0 },
        calibration_samples: acts.map(|a| (0..e).map(|i| a.samples(i)).collect()),
        forward_deviation,
    };
    Ok((layer, report))
}

fn check_block(x: &Matrix, n: usize, h: &Matrix, m: usize, i: usize) -> Result<()> {
    if x.rows() != n || h.rows() != m || x.cols() != h.cols() {
        return Err(Error::Shape {
            what: format!("activations of expert {i}"),
            expected: (n, x.cols()),
            found: x.shape(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::{generate, GenConfig, ModelKind};
    use crate::layer::Layer;

    fn moe(kind: ModelKind, k: usize, seed: u64) -> MoeLayer {
        match generate(&GenConfig::new(kind, 12, 4, 6, 2).group_size(k).seed(seed)).unwrap() {
            Layer::Moe(l) => l,
            Layer::Molae(_) => unreachable!(),
        }
    }

    #[test]
    fn empty_mask_is_bit_identical() {
        let src = moe(ModelKind::Moe, 1, 1);
        let opts = TransformOptions { op_mask: OpMask::NONE, ..TransformOptions::default() };
        let (out, report) = transform_layer(&src, &opts, None).unwrap();
        assert!(report.entries.is_empty());
        let xs = crate::generate::probe_inputs(3, 10, 12);
        for r in 0..10 {
            assert_eq!(src.forward(xs.row(r)).unwrap(), out.forward(xs.row(r)).unwrap());
        }
    }

    #[test]
    fn single_expert_groups_are_exact() {
        let src = moe(ModelKind::Moe, 1, 2);
        let (_, report) = transform_layer(&src, &TransformOptions::default(), None).unwrap();
        assert!(report.forward_deviation.unwrap().max_rel < 1e-10);
        assert!(report.all_exact);
    }

    #[test]
    fn planted_recovery_at_true_group_size() {
        let src = moe(ModelKind::Planted, 3, 3);
        let (_, exact) = transform_layer(&src, &TransformOptions::default().with_group_size(3), None).unwrap();
        assert!(exact.all_exact);
        assert!(exact.forward_deviation.unwrap().max_rel < 1e-8);
        let (_, merged) = transform_layer(&src, &TransformOptions::default().with_group_size(6), None).unwrap();
        assert!(merged.total_residual > exact.total_residual);
        assert!(!merged.all_exact);
    }

    #[test]
    fn down_composite_reproduces_rank_reduced_operator() {
        let src = moe(ModelKind::Moe, 1, 4);
        let opts = TransformOptions { target_rank: Some(3), op_mask: "down".parse().unwrap(), ..Default::default() };
        let (out, report) = transform_layer(&src, &opts, None).unwrap();
        for i in 0..6 {
            let reduced = crate::linalg::low_rank_approx(&src.expert(i).w_down, 3).unwrap();
            assert!(out.composite_operator(i, Operator::Down).unwrap().sub(&reduced).max_abs() < 1e-8);
        }
        assert!(report.entries.iter().all(|r| r.rank_reduction_energy > 0.0));
    }

    #[test]
    fn reported_residual_matches_materialized() {
        let src = moe(ModelKind::Moe, 1, 5);
        let opts = TransformOptions::default().with_group_size(3);
        let (out, report) = transform_layer(&src, &opts, None).unwrap();
        for r in &report.entries {
            let actual: f64 = (r.experts[0]..r.experts[1])
                .map(|i| {
                    let w = match r.operator {
                        Operator::Up => &src.expert(i).w_up,
                        Operator::Gate => &src.expert(i).w_gate,
                        Operator::Down => &src.expert(i).w_down,
                    };
                    w.sub(&out.composite_operator(i, r.operator).unwrap()).frobenius_norm_sq()
                })
                .sum();
            assert!((actual - r.residual).abs() <= 1e-8 * r.residual.max(1e-12), "{actual} vs {}", r.residual);
        }
    }

    #[test]
    fn small_latent_dim_is_padded() {
        let src = moe(ModelKind::Moe, 1, 6);
        let opts = TransformOptions { latent_dim: Some(2), ..TransformOptions::default().with_group_size(2) };
        let (out, report) = transform_layer(&src, &opts, None).unwrap();
        assert!(report.entries.iter().all(|r| r.latent_dim == 2));
        assert_eq!(out.groups()[0].b_up.as_ref().unwrap().shape(), (4, 12));
    }

    #[test]
    fn activation_aware_runs_and_is_deterministic() {
        let src = moe(ModelKind::Moe, 1, 7);
        let acts = collect_activations(&src, 40, 1).unwrap();
        let opts = TransformOptions { mode: TransformMode::ActivationAware, ..TransformOptions::default().with_group_size(3) };
        let (a, ra) = transform_layer(&src, &opts, Some(&acts)).unwrap();
        let (b, rb) = transform_layer(&src, &opts, Some(&acts)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert!(ra.entries.iter().all(|r| r.weighted_residual.is_some()));
        assert!(transform_layer(&src, &opts, None).is_err());
    }

    #[test]
    fn invalid_options_rejected() {
        let src = moe(ModelKind::Moe, 1, 8);
        for opts in [
            TransformOptions::default().with_group_size(0),
            TransformOptions::default().with_group_size(7),
            TransformOptions { latent_dim: Some(5), ..Default::default() },
            TransformOptions { target_rank: Some(0), ..Default::default() },
            TransformOptions { lambda: Some(-1.0), ..Default::default() },
        ] {
            assert!(transform_layer(&src, &opts, None).is_err(), "{opts:?}");
        }
    }
}
