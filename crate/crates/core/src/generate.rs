//! Seeded synthetic layers.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::latent::{group_members, DenseOperators, LatentExpert, LatentGroup, MolaeConfig, MolaeLayer, OpMask, Operator};
use crate::layer::Layer;
use crate::linalg::Matrix;
use crate::moe::{ExpertWeights, MoeConfig, MoeLayer};
use crate::router::RouterWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Moe,
    Molae,
    /// A standard layer whose operators factor exactly through shared
    /// per-group projections of rank `intermediate`.
    Planted,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Moe => "moe",
            ModelKind::Molae => "molae",
            ModelKind::Planted => "planted",
        })
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "moe" => Ok(ModelKind::Moe),
            "molae" => Ok(ModelKind::Molae),
            "planted" => Ok(ModelKind::Planted),
            other => Err(format!("unknown kind `{other}` (expected moe, molae or planted)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenConfig {
    pub kind: ModelKind,
    pub hidden: usize,
    pub intermediate: usize,
    pub experts: usize,
    pub top_k: usize,
    /// Ignored for `Moe`.
    pub group_size: usize,
    /// Only used for `Molae`.
    pub op_mask: OpMask,
    pub activation: Activation,
    pub seed: u64,
}

impl GenConfig {
    pub fn new(kind: ModelKind, hidden: usize, intermediate: usize, experts: usize, top_k: usize) -> Self {
        Self {
            kind,
            hidden,
            intermediate,
            experts,
            top_k,
            group_size: 1,
            op_mask: OpMask::ALL,
            activation: Activation::Silu,
            seed: 0,
        }
    }

    pub fn group_size(mut self, k: usize) -> Self {
        self.group_size = k;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn op_mask(mut self, mask: OpMask) -> Self {
        self.op_mask = mask;
        self
    }

    fn moe_config(&self) -> MoeConfig {
        MoeConfig {
            hidden: self.hidden,
            intermediate: self.intermediate,
            experts: self.experts,
            top_k: self.top_k,
            activation: self.activation,
        }
    }
}

/// Standard-normal matrix scaled by `1/sqrt(fan_in)`, rounded to `f32`-representable values.
pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let scale = 1.0 / (fan_in.max(1) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        (z * scale) as f32 as f64
    })
}

/// `count x n` standard-normal probe rows.
pub fn probe_inputs(seed: u64, count: usize, n: usize) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(count, n, |_, _| rng.sample(StandardNormal))
}

pub fn generate(config: &GenConfig) -> Result<Layer> {
    let moe_config = config.moe_config();
    moe_config.validate()?;
    if config.kind != ModelKind::Moe && (config.group_size == 0 || config.group_size > config.experts) {
        return Err(Error::arg(format!("group size {} outside 1..={}", config.group_size, config.experts)));
    }
    let (n, m, e) = (config.hidden, config.intermediate, config.experts);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let router = RouterWeights::new(random_matrix(&mut rng, e, n, n));
    let layer = match config.kind {
        ModelKind::Moe => {
            let experts = (0..e)
                .map(|_| ExpertWeights {
                    w_up: random_matrix(&mut rng, m, n, n),
                    w_gate: random_matrix(&mut rng, m, n, n),
                    w_down: random_matrix(&mut rng, n, m, m),
                })
                .collect();
            Layer::Moe(MoeLayer::new(moe_config, experts, router)?)
        }
        ModelKind::Molae => {
            let mc = MolaeConfig::from_moe(&moe_config, config.group_size, config.op_mask);
            let mut groups = vec![LatentGroup::default(); mc.groups()];
            let mut latent = vec![LatentExpert::default(); e];
            let mut dense = vec![DenseOperators::default(); e];
            for op in Operator::ALL {
                let (r, c) = mc.operator_shape(op);
                if mc.op_mask.contains(op) {
                    let b_fan = if op == Operator::Down { m } else { n };
                    for g in groups.iter_mut() {
                        g.set(op, Some(random_matrix(&mut rng, r, c, b_fan)));
                    }
                    for a in latent.iter_mut() {
                        a.set(op, Some(random_matrix(&mut rng, m, m, m)));
                    }
                } else {
                    for d in dense.iter_mut() {
                        d.set(op, Some(random_matrix(&mut rng, r, c, c)));
                    }
                }
            }
            Layer::Molae(MolaeLayer::new(mc, groups, latent, dense, router)?)
        }
        ModelKind::Planted => {
            let k = config.group_size;
            let mut experts = vec![ExpertWeights::zeros(n, m); e];
            for g in 0..e.div_ceil(k) {
                let b_up = random_matrix(&mut rng, m, n, n);
                let b_gate = random_matrix(&mut rng, m, n, n);
                let b_down = random_matrix(&mut rng, n, m, m);
                for i in group_members(g, k, e) {
                    experts[i].w_up = random_matrix(&mut rng, m, m, m).matmul(&b_up);
                    experts[i].w_gate = random_matrix(&mut rng, m, m, m).matmul(&b_gate);
                    experts[i].w_down = b_down.matmul(&random_matrix(&mut rng, m, m, m));
                }
            }
            Layer::Moe(MoeLayer::new(moe_config, experts, router)?)
        }
    };
    Ok(layer)
}
