//! Mixture-of-latent-experts layer.
//!
//! Each expert operator is either latent, factored through a projection `B`
//! shared by a group of `k` consecutive experts and an expert-specific
//! `m x m` map `A`, or dense (kept as the original matrix). Up and gate read
//! `A * (B * x)`; down is the reverse form `B * (A * h)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::activation::{gated, gated_backward, Activation};
use crate::error::{check_len, check_shape, Error, Result};
use crate::layer::{Differentiable, FfnLayer, Gradients};
use crate::linalg::Matrix;
use crate::moe::{MoeConfig, MoeLayer};
use crate::router::{RouteDecision, RouterWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operator {
    Up,
    Gate,
    Down,
}

impl Operator {
    pub const ALL: [Operator; 3] = [Operator::Up, Operator::Gate, Operator::Down];

    pub fn name(self) -> &'static str {
        match self {
            Operator::Up => "up",
            Operator::Gate => "gate",
            Operator::Down => "down",
        }
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which operators are held in latent form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OpMask {
    pub up: bool,
    pub gate: bool,
    pub down: bool,
}

impl OpMask {
    pub const ALL: OpMask = OpMask { up: true, gate: true, down: true };
    pub const NONE: OpMask = OpMask { up: false, gate: false, down: false };

    pub fn contains(self, op: Operator) -> bool {
        match op {
            Operator::Up => self.up,
            Operator::Gate => self.gate,
            Operator::Down => self.down,
        }
    }

    pub fn with(mut self, op: Operator) -> Self {
        match op {
            Operator::Up => self.up = true,
            Operator::Gate => self.gate = true,
            Operator::Down => self.down = true,
        }
        self
    }

    pub fn ops(self) -> impl Iterator<Item = Operator> {
        Operator::ALL.into_iter().filter(move |&op| self.contains(op))
    }

    pub fn count(self) -> usize {
        self.ops().count()
    }

    pub fn is_empty(self) -> bool {
        self.count() == 0
    }

    pub fn bits(self) -> u32 {
        self.up as u32 | (self.gate as u32) << 1 | (self.down as u32) << 2
    }

    pub fn from_bits(bits: u32) -> Option<Self> {
        (bits < 8).then_some(OpMask { up: bits & 1 != 0, gate: bits & 2 != 0, down: bits & 4 != 0 })
    }
}

impl fmt::Display for OpMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("none");
        }
        let names: Vec<&str> = self.ops().map(Operator::name).collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for OpMask {
    type Err = String;

    /// Comma-separated operator names, `all`, or `none`/empty.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s.to_ascii_lowercase().as_str() {
            "" | "none" => return Ok(OpMask::NONE),
            "all" => return Ok(OpMask::ALL),
            _ => {}
        }
        let mut mask = OpMask::NONE;
        for part in s.split(',') {
            let op = match part.trim().to_ascii_lowercase().as_str() {
                "up" => Operator::Up,
                "gate" => Operator::Gate,
                "down" => Operator::Down,
                other => return Err(format!("unknown operator `{other}` (expected up, gate, down)")),
            };
            mask = mask.with(op);
        }
        Ok(mask)
    }
}

/// Number of groups, `ceil(N / k)`.
pub fn group_count(experts: usize, group_size: usize) -> usize {
    experts.div_ceil(group_size)
}

/// Group holding 0-based expert `expert`: consecutive blocks of `group_size`.
pub fn group_index(expert: usize, group_size: usize, experts: usize) -> Result<usize> {
    if group_size == 0 {
        return Err(Error::arg("group size must be positive"));
    }
    if expert >= experts {
        return Err(Error::arg(format!("expert {expert} out of range for {experts} experts")));
    }
    Ok(expert / group_size)
}

/// Experts belonging to group `group`.
pub fn group_members(group: usize, group_size: usize, experts: usize) -> std::ops::Range<usize> {
    let start = group * group_size;
    start.min(experts)..((group + 1) * group_size).min(experts)
}

/// Expert-specific latent maps, each `m x m` when present.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LatentExpert {
    pub a_up: Option<Matrix>,
    pub a_gate: Option<Matrix>,
    pub a_down: Option<Matrix>,
}

/// Shared projections: `b_up`, `b_gate` are `m x n`; `b_down` is `n x m`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LatentGroup {
    pub b_up: Option<Matrix>,
    pub b_gate: Option<Matrix>,
    pub b_down: Option<Matrix>,
}

/// Original matrices for operators outside the op-mask.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DenseOperators {
    pub w_up: Option<Matrix>,
    pub w_gate: Option<Matrix>,
    pub w_down: Option<Matrix>,
}

macro_rules! op_slot {
    ($ty:ident, $up:ident, $gate:ident, $down:ident) => {
        impl $ty {
            pub fn get(&self, op: Operator) -> Option<&Matrix> {
                match op {
                    Operator::Up => self.$up.as_ref(),
                    Operator::Gate => self.$gate.as_ref(),
                    Operator::Down => self.$down.as_ref(),
                }
            }

            pub fn get_mut(&mut self, op: Operator) -> Option<&mut Matrix> {
                match op {
                    Operator::Up => self.$up.as_mut(),
                    Operator::Gate => self.$gate.as_mut(),
                    Operator::Down => self.$down.as_mut(),
                }
            }

            pub fn set(&mut self, op: Operator, m: Option<Matrix>) {
                match op {
                    Operator::Up => self.$up = m,
                    Operator::Gate => self.$gate = m,
                    Operator::Down => self.$down = m,
                }
            }

            fn present_mut(&mut self) -> Vec<&mut Matrix> {
                [self.$up.as_mut(), self.$gate.as_mut(), self.$down.as_mut()].into_iter().flatten().collect()
            }

            fn present(&self) -> Vec<&Matrix> {
                [self.$up.as_ref(), self.$gate.as_ref(), self.$down.as_ref()].into_iter().flatten().collect()
            }

            pub fn param_count(&self) -> usize {
                self.present().iter().map(|m| m.data().len()).sum()
            }

            fn zeros_like(&self) -> Self {
                let z = |m: &Option<Matrix>| m.as_ref().map(|m| Matrix::zeros(m.rows(), m.cols()));
                Self { $up: z(&self.$up), $gate: z(&self.$gate), $down: z(&self.$down) }
            }
        }
    };
}

op_slot!(LatentExpert, a_up, a_gate, a_down);
op_slot!(LatentGroup, b_up, b_gate, b_down);
op_slot!(DenseOperators, w_up, w_gate, w_down);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MolaeConfig {
    pub hidden: usize,
    pub intermediate: usize,
    pub experts: usize,
    pub top_k: usize,
    /// Experts per shared projection, `k`.
    pub group_size: usize,
    pub op_mask: OpMask,
    pub activation: Activation,
}

impl MolaeConfig {
    pub fn from_moe(moe: &MoeConfig, group_size: usize, op_mask: OpMask) -> Self {
        Self {
            hidden: moe.hidden,
            intermediate: moe.intermediate,
            experts: moe.experts,
            top_k: moe.top_k,
            group_size,
            op_mask,
            activation: moe.activation,
        }
    }

    pub fn moe_config(&self) -> MoeConfig {
        MoeConfig {
            hidden: self.hidden,
            intermediate: self.intermediate,
            experts: self.experts,
            top_k: self.top_k,
            activation: self.activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.moe_config().validate()?;
        if self.group_size == 0 || self.group_size > self.experts {
            return Err(Error::arg(format!(
                "group size {} outside 1..={}",
                self.group_size, self.experts
            )));
        }
        Ok(())
    }

    pub fn groups(&self) -> usize {
        group_count(self.experts, self.group_size)
    }

    /// `(rows, cols)` of the composite operator.
    pub fn operator_shape(&self, op: Operator) -> (usize, usize) {
        match op {
            Operator::Up | Operator::Gate => (self.intermediate, self.hidden),
            Operator::Down => (self.hidden, self.intermediate),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MolaeLayer {
    config: MolaeConfig,
    groups: Vec<LatentGroup>,
    latent_experts: Vec<LatentExpert>,
    dense_experts: Vec<DenseOperators>,
    router: RouterWeights,
}

impl MolaeLayer {
    pub fn new(
        config: MolaeConfig,
        groups: Vec<LatentGroup>,
        latent_experts: Vec<LatentExpert>,
        dense_experts: Vec<DenseOperators>,
        router: RouterWeights,
    ) -> Result<Self> {
        config.validate()?;
        let (n, m) = (config.hidden, config.intermediate);
        if groups.len() != config.groups() {
            return Err(Error::arg(format!(
                "expected {} groups for N = {}, k = {}, got {}",
                config.groups(),
                config.experts,
                config.group_size,
                groups.len()
            )));
        }
        if latent_experts.len() != config.experts || dense_experts.len() != config.experts {
            return Err(Error::arg(format!(
                "expected {} latent and dense expert entries, got {} and {}",
                config.experts,
                latent_experts.len(),
                dense_experts.len()
            )));
        }
        for op in Operator::ALL {
            let latent = config.op_mask.contains(op);
            let b_shape = config.operator_shape(op);
            for (g, group) in groups.iter().enumerate() {
                check_presence(group.get(op), latent, b_shape, || format!("groups.{g}.b_{op}"))?;
            }
            for i in 0..config.experts {
                check_presence(latent_experts[i].get(op), latent, (m, m), || format!("experts.{i}.a_{op}"))?;
                check_presence(dense_experts[i].get(op), !latent, b_shape, || format!("experts.{i}.{op}"))?;
            }
        }
        check_shape(|| "router".into(), (config.experts, n), router.w_router.shape())?;
        Ok(Self { config, groups, latent_experts, dense_experts, router })
    }

    /// A layer with no latent operators that reproduces `moe` exactly.
    pub fn dense_from_moe(moe: &MoeLayer, group_size: usize) -> Result<Self> {
        let config = MolaeConfig::from_moe(moe.config(), group_size, OpMask::NONE);
        config.validate()?;
        let dense = moe
            .experts()
            .iter()
            .map(|e| DenseOperators {
                w_up: Some(e.w_up.clone()),
                w_gate: Some(e.w_gate.clone()),
                w_down: Some(e.w_down.clone()),
            })
            .collect();
        Self::new(
            config,
            vec![LatentGroup::default(); config.groups()],
            vec![LatentExpert::default(); config.experts],
            dense,
            moe.router().clone(),
        )
    }

    /// Layer with every stored matrix zero.
    pub fn zeros(config: MolaeConfig) -> Result<Self> {
        config.validate()?;
        let (n, m) = (config.hidden, config.intermediate);
        let mut groups = vec![LatentGroup::default(); config.groups()];
        let mut latent = vec![LatentExpert::default(); config.experts];
        let mut dense = vec![DenseOperators::default(); config.experts];
        for op in Operator::ALL {
            let (r, c) = config.operator_shape(op);
            if config.op_mask.contains(op) {
                groups.iter_mut().for_each(|g| g.set(op, Some(Matrix::zeros(r, c))));
                latent.iter_mut().for_each(|e| e.set(op, Some(Matrix::zeros(m, m))));
            } else {
                dense.iter_mut().for_each(|d| d.set(op, Some(Matrix::zeros(r, c))));
            }
        }
        Self::new(config, groups, latent, dense, RouterWeights::zeros(config.experts, n))
    }

    pub fn config(&self) -> &MolaeConfig {
        &self.config
    }

    pub fn groups(&self) -> &[LatentGroup] {
        &self.groups
    }

    pub fn latent_experts(&self) -> &[LatentExpert] {
        &self.latent_experts
    }

    pub fn dense_experts(&self) -> &[DenseOperators] {
        &self.dense_experts
    }

    pub fn groups_mut(&mut self) -> &mut [LatentGroup] {
        &mut self.groups
    }

    pub fn latent_experts_mut(&mut self) -> &mut [LatentExpert] {
        &mut self.latent_experts
    }

    pub fn dense_experts_mut(&mut self) -> &mut [DenseOperators] {
        &mut self.dense_experts
    }

    pub fn router_mut(&mut self) -> &mut RouterWeights {
        &mut self.router
    }

    pub fn group_of(&self, expert: usize) -> Result<usize> {
        group_index(expert, self.config.group_size, self.config.experts)
    }

    /// Materializes operator `op` of `expert`: `A * B` for up/gate, `B * A` for down.
    pub fn composite_operator(&self, expert: usize, op: Operator) -> Result<Matrix> {
        let g = self.group_of(expert)?;
        if !self.config.op_mask.contains(op) {
            return Err(Error::arg(format!("operator {op} is not latent in this layer")));
        }
        let a = self.latent_experts[expert].get(op).expect("validated");
        let b = self.groups[g].get(op).expect("validated");
        Ok(match op {
            Operator::Up | Operator::Gate => a.matmul(b),
            Operator::Down => b.matmul(a),
        })
    }

    /// Applies an input-side operator (up or gate) of expert `i` in group `g`.
    fn project_in(&self, i: usize, g: usize, op: Operator, x: &[f64]) -> (Vec<f64>, Option<Vec<f64>>) {
        match (self.latent_experts[i].get(op), self.groups[g].get(op)) {
            (Some(a), Some(b)) => {
                let z = b.matvec(x);
                (a.matvec(&z), Some(z))
            }
            _ => (self.dense_experts[i].get(op).expect("validated").matvec(x), None),
        }
    }

    fn project_out(&self, i: usize, g: usize, h: &[f64]) -> (Vec<f64>, Option<Vec<f64>>) {
        match (self.latent_experts[i].a_down.as_ref(), self.groups[g].b_down.as_ref()) {
            (Some(a), Some(b)) => {
                let t = a.matvec(h);
                (b.matvec(&t), Some(t))
            }
            _ => (self.dense_experts[i].w_down.as_ref().expect("validated").matvec(h), None),
        }
    }
}

fn check_presence(
    m: Option<&Matrix>,
    expected: bool,
    shape: (usize, usize),
    name: impl Fn() -> String,
) -> Result<()> {
    match (m, expected) {
        (Some(m), true) => check_shape(&name, shape, m.shape()),
        (None, false) => Ok(()),
        (Some(_), false) => Err(Error::arg(format!("{} present but excluded by the op-mask", name()))),
        (None, true) => Err(Error::arg(format!("{} missing", name()))),
    }
}

impl FfnLayer for MolaeLayer {
    fn hidden_dim(&self) -> usize {
        self.config.hidden
    }
    fn intermediate_dim(&self) -> usize {
        self.config.intermediate
    }
    fn expert_count(&self) -> usize {
        self.config.experts
    }
    fn top_k(&self) -> usize {
        self.config.top_k
    }
    fn router(&self) -> &RouterWeights {
        &self.router
    }

    fn expert_output(&self, expert: usize, x: &[f64]) -> Result<Vec<f64>> {
        let g = self.group_of(expert)?;
        check_len("expert input", self.config.hidden, x.len())?;
        let (up, _) = self.project_in(expert, g, Operator::Up, x);
        let (gate, _) = self.project_in(expert, g, Operator::Gate, x);
        let h = gated(self.config.activation, &up, &gate);
        Ok(self.project_out(expert, g, &h).0)
    }

    fn census(&self) -> usize {
        self.groups.iter().map(LatentGroup::param_count).sum::<usize>()
            + self.latent_experts.iter().map(LatentExpert::param_count).sum::<usize>()
            + self.dense_experts.iter().map(DenseOperators::param_count).sum::<usize>()
    }
}

#[derive(Debug, Clone)]
struct LatentTrace {
    up: Vec<f64>,
    gate: Vec<f64>,
    hidden: Vec<f64>,
    out: Vec<f64>,
    /// `B * x` for latent up / gate, `A * h` for latent down.
    z_up: Option<Vec<f64>>,
    z_gate: Option<Vec<f64>>,
    t_down: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct MolaeRecord {
    x: Vec<f64>,
    decision: RouteDecision,
    traces: Vec<LatentTrace>,
}

/// Per-call scratch for [`MolaeLayer`] backward passes.
#[derive(Debug, Clone, Default)]
pub struct MolaeTape {
    record: Option<MolaeRecord>,
}

impl MolaeTape {
    pub fn is_recorded(&self) -> bool {
        self.record.is_some()
    }
}

/// Gradients mirroring the layer's storage; `B` gradients sum over the group.
#[derive(Debug, Clone, PartialEq)]
pub struct MolaeGrads {
    pub router: Matrix,
    pub groups: Vec<LatentGroup>,
    pub latent_experts: Vec<LatentExpert>,
    pub dense_experts: Vec<DenseOperators>,
}

impl Gradients for MolaeGrads {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.router];
        self.groups.iter().for_each(|g| out.extend(g.present()));
        self.latent_experts.iter().for_each(|e| out.extend(e.present()));
        self.dense_experts.iter().for_each(|d| out.extend(d.present()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.router];
        self.groups.iter_mut().for_each(|g| out.extend(g.present_mut()));
        self.latent_experts.iter_mut().for_each(|e| out.extend(e.present_mut()));
        self.dense_experts.iter_mut().for_each(|d| out.extend(d.present_mut()));
        out
    }
}

impl Differentiable for MolaeLayer {
    type Tape = MolaeTape;
    type Grads = MolaeGrads;

    fn forward_record(&self, x: &[f64], tape: &mut MolaeTape) -> Result<Vec<f64>> {
        check_len("layer input", self.config.hidden, x.len())?;
        let decision = self.route(x)?;
        let mut y = x.to_vec();
        let mut traces = Vec::with_capacity(decision.indices.len());
        for (&i, &gw) in decision.indices.iter().zip(&decision.gates) {
            let g = self.group_of(i)?;
            let (up, z_up) = self.project_in(i, g, Operator::Up, x);
            let (gate, z_gate) = self.project_in(i, g, Operator::Gate, x);
            let hidden = gated(self.config.activation, &up, &gate);
            let (out, t_down) = self.project_out(i, g, &hidden);
            for (yi, ei) in y.iter_mut().zip(&out) {
                *yi += gw * ei;
            }
            traces.push(LatentTrace { up, gate, hidden, out, z_up, z_gate, t_down });
        }
        tape.record = Some(MolaeRecord { x: x.to_vec(), decision, traces });
        Ok(y)
    }

    fn backward_into(&self, tape: &MolaeTape, dy: &[f64], grads: &mut MolaeGrads) -> Result<Vec<f64>> {
        let rec = tape.record.as_ref().ok_or(Error::MissingCache)?;
        check_len("output gradient", self.config.hidden, dy.len())?;
        let x = &rec.x;
        let mut dx = dy.to_vec();
        let mut d_gates = Vec::with_capacity(rec.traces.len());
        for ((&i, &gw), tr) in rec.decision.indices.iter().zip(&rec.decision.gates).zip(&rec.traces) {
            let g = self.group_of(i)?;
            d_gates.push(crate::linalg::dot(dy, &tr.out));
            let d_out: Vec<f64> = dy.iter().map(|v| gw * v).collect();

            let dh = match &tr.t_down {
                Some(t) => {
                    let a = self.latent_experts[i].a_down.as_ref().expect("validated");
                    let b = self.groups[g].b_down.as_ref().expect("validated");
                    grads.groups[g].b_down.as_mut().expect("mirrors layer").add_outer(1.0, &d_out, t);
                    let dt = b.t_matvec(&d_out);
                    grads.latent_experts[i].a_down.as_mut().expect("mirrors layer").add_outer(1.0, &dt, &tr.hidden);
                    a.t_matvec(&dt)
                }
                None => {
                    let w = self.dense_experts[i].w_down.as_ref().expect("validated");
                    grads.dense_experts[i].w_down.as_mut().expect("mirrors layer").add_outer(1.0, &d_out, &tr.hidden);
                    w.t_matvec(&d_out)
                }
            };
            let (d_up, d_gate) = gated_backward(self.config.activation, &tr.up, &tr.gate, &dh);
            for (op, d, z) in [(Operator::Up, &d_up, &tr.z_up), (Operator::Gate, &d_gate, &tr.z_gate)] {
                let contrib = match z {
                    Some(z) => {
                        let a = self.latent_experts[i].get(op).expect("validated");
                        let b = self.groups[g].get(op).expect("validated");
                        grads.latent_experts[i].get_mut(op).expect("mirrors layer").add_outer(1.0, d, z);
                        let dz = a.t_matvec(d);
                        grads.groups[g].get_mut(op).expect("mirrors layer").add_outer(1.0, &dz, x);
                        b.t_matvec(&dz)
                    }
                    None => {
                        let w = self.dense_experts[i].get(op).expect("validated");
                        grads.dense_experts[i].get_mut(op).expect("mirrors layer").add_outer(1.0, d, x);
                        w.t_matvec(d)
                    }
                };
                for (o, v) in dx.iter_mut().zip(contrib) {
                    *o += v;
                }
            }
        }
        self.router.backward_into(x, &rec.decision, &d_gates, &mut grads.router, &mut dx);
        Ok(dx)
    }

    fn zero_grads(&self) -> MolaeGrads {
        MolaeGrads {
            router: Matrix::zeros(self.config.experts, self.config.hidden),
            groups: self.groups.iter().map(LatentGroup::zeros_like).collect(),
            latent_experts: self.latent_experts.iter().map(LatentExpert::zeros_like).collect(),
            dense_experts: self.dense_experts.iter().map(DenseOperators::zeros_like).collect(),
        }
    }

    fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.router.w_router];
        self.groups.iter_mut().for_each(|g| out.extend(g.present_mut()));
        self.latent_experts.iter_mut().for_each(|e| out.extend(e.present_mut()));
        self.dense_experts.iter_mut().for_each(|d| out.extend(d.present_mut()));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::expert_forward;

    #[test]
    fn grouping_is_contiguous() {
        for i in 0..8 {
            assert_eq!(group_index(i, 8, 16).unwrap(), 0);
        }
        assert_eq!(group_index(8, 8, 16).unwrap(), 1);
        let distinct: std::collections::BTreeSet<_> = (0..60).map(|i| group_index(i, 10, 60).unwrap()).collect();
        assert_eq!(distinct.len(), 6);
        assert_eq!(group_count(60, 10), 6);
        assert!(group_index(60, 10, 60).is_err());
        assert!(group_index(0, 0, 60).is_err());
    }

    #[test]
    fn uneven_last_group() {
        assert_eq!(group_count(10, 4), 3);
        assert_eq!(group_members(2, 4, 10), 8..10);
    }

    #[test]
    fn op_mask_parsing() {
        assert_eq!("up,gate,down".parse::<OpMask>().unwrap(), OpMask::ALL);
        assert_eq!("gate, down".parse::<OpMask>().unwrap(), OpMask { up: false, gate: true, down: true });
        assert_eq!("none".parse::<OpMask>().unwrap(), OpMask::NONE);
        assert_eq!("".parse::<OpMask>().unwrap(), OpMask::NONE);
        assert!("up,sideways".parse::<OpMask>().is_err());
        for bits in 0..8 {
            let m = OpMask::from_bits(bits).unwrap();
            assert_eq!(m.bits(), bits);
            assert_eq!(m.to_string().parse::<OpMask>().unwrap(), m);
        }
    }

    fn config(n: usize, m: usize, experts: usize, k: usize, mask: OpMask) -> MolaeConfig {
        MolaeConfig {
            hidden: n,
            intermediate: m,
            experts,
            top_k: 1,
            group_size: k,
            op_mask: mask,
            activation: Activation::Identity,
        }
    }

    #[test]
    fn zero_layer_outputs_input() {
        let layer = MolaeLayer::zeros(config(3, 2, 4, 2, OpMask::ALL)).unwrap();
        assert_eq!(layer.expert_output(1, &[1.0, 2.0, 3.0]).unwrap(), vec![0.0; 3]);
        assert_eq!(layer.forward(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn hand_evaluated_latent_expert() {
        let mut layer = MolaeLayer::zeros(config(2, 1, 1, 1, OpMask::ALL)).unwrap();
        let g = &mut layer.groups_mut()[0];
        g.b_up = Some(Matrix::from_rows(&[[1.0, 0.0]]));
        g.b_gate = Some(Matrix::from_rows(&[[1.0, 0.0]]));
        g.b_down = Some(Matrix::from_rows(&[[0.0], [3.0]]));
        let e = &mut layer.latent_experts_mut()[0];
        e.a_up = Some(Matrix::from_rows(&[[2.0]]));
        e.a_gate = Some(Matrix::from_rows(&[[1.0]]));
        e.a_down = Some(Matrix::from_rows(&[[1.0]]));
        assert_eq!(layer.expert_output(0, &[1.0, 5.0]).unwrap(), vec![0.0, 6.0]);
    }

    #[test]
    fn identity_maps_reproduce_dense_expert() {
        let (n, m) = (4, 3);
        let w_up = Matrix::from_fn(m, n, |i, j| (i as f64 - j as f64) * 0.3);
        let w_gate = Matrix::from_fn(m, n, |i, j| ((i * j) as f64).sin());
        let w_down = Matrix::from_fn(n, m, |i, j| (i + 2 * j) as f64 * 0.1);
        let mut layer = MolaeLayer::zeros(MolaeConfig { activation: Activation::Silu, ..config(n, m, 1, 1, OpMask::ALL) })
            .unwrap();
        layer.groups_mut()[0] =
            LatentGroup { b_up: Some(w_up.clone()), b_gate: Some(w_gate.clone()), b_down: Some(w_down.clone()) };
        layer.latent_experts_mut()[0] = LatentExpert {
            a_up: Some(Matrix::identity(m)),
            a_gate: Some(Matrix::identity(m)),
            a_down: Some(Matrix::identity(m)),
        };
        let x = [0.5, -1.0, 2.0, 0.25];
        let expert = crate::moe::ExpertWeights { w_up: w_up.clone(), w_gate, w_down };
        let want = expert_forward(&expert, &x, Activation::Silu).unwrap();
        let got = layer.expert_output(0, &x).unwrap();
        for (a, b) in want.iter().zip(&got) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(layer.composite_operator(0, Operator::Up).unwrap(), w_up);
        assert_eq!(layer.composite_operator(0, Operator::Down).unwrap().shape(), (n, m));
    }

    #[test]
    fn composite_of_dense_operator_is_an_error() {
        let layer = MolaeLayer::zeros(config(3, 2, 2, 1, "gate,down".parse().unwrap())).unwrap();
        assert!(layer.composite_operator(0, Operator::Up).is_err());
        assert!(layer.composite_operator(0, Operator::Gate).is_ok());
        assert!(layer.composite_operator(2, Operator::Gate).is_err());
    }

    #[test]
    fn construction_checks_mask_consistency() {
        let layer = MolaeLayer::zeros(config(3, 2, 2, 1, OpMask::ALL)).unwrap();
        let mut dense = layer.dense_experts().to_vec();
        dense[1].w_up = Some(Matrix::zeros(2, 3));
        let err = MolaeLayer::new(
            *layer.config(),
            layer.groups().to_vec(),
            layer.latent_experts().to_vec(),
            dense,
            layer.router().clone(),
        );
        assert!(err.is_err());
        assert!(MolaeLayer::zeros(config(3, 2, 2, 3, OpMask::ALL)).is_err());
    }

    #[test]
    fn missing_tape_is_a_state_error() {
        let layer = MolaeLayer::zeros(config(3, 2, 2, 1, OpMask::ALL)).unwrap();
        assert!(matches!(layer.backward(&MolaeTape::default(), &[0.0; 3]), Err(Error::MissingCache)));
    }
}
