//! Standard mixture-of-experts feed-forward layer.

use crate::activation::{gated, gated_backward, Activation};
use crate::error::{check_len, check_shape, Error, Result};
use crate::layer::{Differentiable, FfnLayer, Gradients};
use crate::linalg::Matrix;
use crate::router::{RouteDecision, RouterWeights};

/// One gated expert: `E(x) = w_down ((w_up x) ⊙ act(w_gate x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertWeights {
    /// `m x n`
    pub w_up: Matrix,
    /// `m x n`
    pub w_gate: Matrix,
    /// `n x m`
    pub w_down: Matrix,
}

impl ExpertWeights {
    pub fn zeros(hidden: usize, intermediate: usize) -> Self {
        Self {
            w_up: Matrix::zeros(intermediate, hidden),
            w_gate: Matrix::zeros(intermediate, hidden),
            w_down: Matrix::zeros(hidden, intermediate),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_up.cols()
    }

    pub fn intermediate(&self) -> usize {
        self.w_up.rows()
    }

    pub fn check(&self, hidden: usize, intermediate: usize, label: &str) -> Result<()> {
        check_shape(|| format!("{label}.up"), (intermediate, hidden), self.w_up.shape())?;
        check_shape(|| format!("{label}.gate"), (intermediate, hidden), self.w_gate.shape())?;
        check_shape(|| format!("{label}.down"), (hidden, intermediate), self.w_down.shape())
    }

    pub fn param_count(&self) -> usize {
        self.w_up.data().len() + self.w_gate.data().len() + self.w_down.data().len()
    }
}

/// Evaluates one expert on `x`.
pub fn expert_forward(e: &ExpertWeights, x: &[f64], act: Activation) -> Result<Vec<f64>> {
    e.check(e.hidden(), e.intermediate(), "expert")?;
    check_len("expert input", e.hidden(), x.len())?;
    let up = e.w_up.matvec(x);
    let gate = e.w_gate.matvec(x);
    Ok(e.w_down.matvec(&gated(act, &up, &gate)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MoeConfig {
    /// Hidden dimension `n`.
    pub hidden: usize,
    /// Expert intermediate dimension `m`.
    pub intermediate: usize,
    /// Expert count `N`.
    pub experts: usize,
    pub top_k: usize,
    pub activation: Activation,
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.intermediate == 0 {
            return Err(Error::arg("hidden and intermediate dimensions must be positive"));
        }
        if self.experts == 0 {
            return Err(Error::arg("a layer needs at least one expert"));
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return Err(Error::arg(format!("top_k = {} outside 1..={}", self.top_k, self.experts)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer {
    config: MoeConfig,
    experts: Vec<ExpertWeights>,
    router: RouterWeights,
}

impl MoeLayer {
    pub fn new(config: MoeConfig, experts: Vec<ExpertWeights>, router: RouterWeights) -> Result<Self> {
        config.validate()?;
        if experts.len() != config.experts {
            return Err(Error::arg(format!(
                "config declares {} experts but {} were given",
                config.experts,
                experts.len()
            )));
        }
        for (i, e) in experts.iter().enumerate() {
            e.check(config.hidden, config.intermediate, &format!("experts.{i}"))?;
        }
        check_shape(|| "router".into(), (config.experts, config.hidden), router.w_router.shape())?;
        Ok(Self { config, experts, router })
    }

    /// Layer with every weight zero.
    pub fn zeros(config: MoeConfig) -> Result<Self> {
        config.validate()?;
        let experts = (0..config.experts)
            .map(|_| ExpertWeights::zeros(config.hidden, config.intermediate))
            .collect();
        Self::new(config, experts, RouterWeights::zeros(config.experts, config.hidden))
    }

    pub fn config(&self) -> &MoeConfig {
        &self.config
    }

    pub fn experts(&self) -> &[ExpertWeights] {
        &self.experts
    }

    pub fn expert(&self, i: usize) -> &ExpertWeights {
        &self.experts[i]
    }

    pub fn activation(&self) -> Activation {
        self.config.activation
    }

    /// Mutable access for tests and optimizers; shapes must be preserved.
    pub fn experts_mut(&mut self) -> &mut [ExpertWeights] {
        &mut self.experts
    }

    pub fn router_mut(&mut self) -> &mut RouterWeights {
        &mut self.router
    }

    /// The dense formulation: all `N` experts evaluated, non-selected gates zero.
    pub fn forward_dense(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("layer input", self.config.hidden, x.len())?;
        let decision = self.route(x)?;
        let mut gates = vec![0.0; self.config.experts];
        for (&i, &g) in decision.indices.iter().zip(&decision.gates) {
            gates[i] = g;
        }
        let mut y = x.to_vec();
        for (i, g) in gates.iter().enumerate() {
            let e = expert_forward(&self.experts[i], x, self.config.activation)?;
            for (yi, ei) in y.iter_mut().zip(&e) {
                *yi += g * ei;
            }
        }
        Ok(y)
    }
}

impl FfnLayer for MoeLayer {
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
        let e = self
            .experts
            .get(expert)
            .ok_or_else(|| Error::arg(format!("expert {expert} out of range")))?;
        expert_forward(e, x, self.config.activation)
    }

    fn census(&self) -> usize {
        self.experts.iter().map(ExpertWeights::param_count).sum()
    }
}

#[derive(Debug, Clone)]
struct ExpertTrace {
    up: Vec<f64>,
    gate: Vec<f64>,
    hidden: Vec<f64>,
    out: Vec<f64>,
}

#[derive(Debug, Clone)]
struct MoeRecord {
    x: Vec<f64>,
    decision: RouteDecision,
    traces: Vec<ExpertTrace>,
}

/// Per-call scratch holding what [`MoeLayer::backward_into`] needs.
#[derive(Debug, Clone, Default)]
pub struct MoeTape {
    record: Option<MoeRecord>,
}

impl MoeTape {
    pub fn is_recorded(&self) -> bool {
        self.record.is_some()
    }

    pub fn decision(&self) -> Option<&RouteDecision> {
        self.record.as_ref().map(|r| &r.decision)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeGrads {
    pub router: Matrix,
    pub experts: Vec<ExpertWeights>,
}

impl Gradients for MoeGrads {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.router];
        for e in &self.experts {
            out.extend([&e.w_up, &e.w_gate, &e.w_down]);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.router];
        for e in &mut self.experts {
            out.extend([&mut e.w_up, &mut e.w_gate, &mut e.w_down]);
        }
        out
    }
}

impl Differentiable for MoeLayer {
    type Tape = MoeTape;
    type Grads = MoeGrads;

    fn forward_record(&self, x: &[f64], tape: &mut MoeTape) -> Result<Vec<f64>> {
        check_len("layer input", self.config.hidden, x.len())?;
        let decision = self.route(x)?;
        let act = self.config.activation;
        let mut y = x.to_vec();
        let mut traces = Vec::with_capacity(decision.indices.len());
        for (&i, &g) in decision.indices.iter().zip(&decision.gates) {
            let e = &self.experts[i];
            let up = e.w_up.matvec(x);
            let gate = e.w_gate.matvec(x);
            let hidden = gated(act, &up, &gate);
            let out = e.w_down.matvec(&hidden);
            for (yi, ei) in y.iter_mut().zip(&out) {
                *yi += g * ei;
            }
            traces.push(ExpertTrace { up, gate, hidden, out });
        }
        tape.record = Some(MoeRecord { x: x.to_vec(), decision, traces });
        Ok(y)
    }

    fn backward_into(&self, tape: &MoeTape, dy: &[f64], grads: &mut MoeGrads) -> Result<Vec<f64>> {
        let rec = tape.record.as_ref().ok_or(Error::MissingCache)?;
        check_len("output gradient", self.config.hidden, dy.len())?;
        let act = self.config.activation;
        // Residual path.
        let mut dx = dy.to_vec();
        let mut d_gates = Vec::with_capacity(rec.traces.len());
        for ((&i, &g), tr) in rec.decision.indices.iter().zip(&rec.decision.gates).zip(&rec.traces) {
            d_gates.push(crate::linalg::dot(dy, &tr.out));
            let e = &self.experts[i];
            let ge = &mut grads.experts[i];
            let d_out: Vec<f64> = dy.iter().map(|v| g * v).collect();
            ge.w_down.add_outer(1.0, &d_out, &tr.hidden);
            let dh = e.w_down.t_matvec(&d_out);
            let (d_up, d_gate) = gated_backward(act, &tr.up, &tr.gate, &dh);
            ge.w_up.add_outer(1.0, &d_up, &rec.x);
            ge.w_gate.add_outer(1.0, &d_gate, &rec.x);
            for (o, v) in dx.iter_mut().zip(e.w_up.t_matvec(&d_up)) {
                *o += v;
            }
            for (o, v) in dx.iter_mut().zip(e.w_gate.t_matvec(&d_gate)) {
                *o += v;
            }
        }
        self.router.backward_into(&rec.x, &rec.decision, &d_gates, &mut grads.router, &mut dx);
        Ok(dx)
    }

    fn zero_grads(&self) -> MoeGrads {
        MoeGrads {
            router: Matrix::zeros(self.config.experts, self.config.hidden),
            experts: (0..self.config.experts)
                .map(|_| ExpertWeights::zeros(self.config.hidden, self.config.intermediate))
                .collect(),
        }
    }

    fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.router.w_router];
        for e in &mut self.experts {
            out.extend([&mut e.w_up, &mut e.w_gate, &mut e.w_down]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(hidden: usize, intermediate: usize, experts: usize, top_k: usize) -> MoeConfig {
        MoeConfig { hidden, intermediate, experts, top_k, activation: Activation::Identity }
    }

    fn scalar_expert(up: f64, gate: f64, down: f64) -> ExpertWeights {
        ExpertWeights {
            w_up: Matrix::from_rows(&[[up]]),
            w_gate: Matrix::from_rows(&[[gate]]),
            w_down: Matrix::from_rows(&[[down]]),
        }
    }

    #[test]
    fn zero_expert_outputs_zero() {
        let e = ExpertWeights::zeros(3, 2);
        assert_eq!(expert_forward(&e, &[1.0, 2.0, 3.0], Activation::Silu).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn scalar_expert_hand_value() {
        let e = scalar_expert(2.0, 1.0, 3.0);
        assert_eq!(expert_forward(&e, &[1.0], Activation::Identity).unwrap(), vec![6.0]);
    }

    #[test]
    fn expert_rejects_wrong_input_length() {
        let e = ExpertWeights::zeros(3, 2);
        assert!(matches!(expert_forward(&e, &[1.0], Activation::Silu), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_layer_is_residual_identity() {
        let layer = MoeLayer::zeros(MoeConfig { activation: Activation::Silu, ..config(4, 2, 3, 2) }).unwrap();
        let x = [0.3, -1.0, 2.0, 0.0];
        assert_eq!(layer.forward(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn single_expert_has_unit_gate() {
        let layer = MoeLayer::new(config(1, 1, 1, 1), vec![scalar_expert(2.0, 1.0, 3.0)], RouterWeights::zeros(1, 1))
            .unwrap();
        assert_eq!(layer.forward(&[1.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn construction_validates_shapes() {
        let bad = MoeLayer::new(config(2, 1, 1, 1), vec![scalar_expert(1.0, 1.0, 1.0)], RouterWeights::zeros(1, 2));
        assert!(matches!(bad, Err(Error::Shape { .. })));
        assert!(MoeLayer::zeros(config(2, 1, 0, 1)).is_err());
        assert!(MoeLayer::zeros(config(2, 1, 2, 3)).is_err());
    }

    #[test]
    fn backward_without_forward_is_a_state_error() {
        let layer = MoeLayer::zeros(config(2, 1, 2, 1)).unwrap();
        let tape = MoeTape::default();
        assert!(matches!(layer.backward(&tape, &[1.0, 1.0]), Err(Error::MissingCache)));
    }

    #[test]
    fn scalar_gradients_match_product_rule() {
        // y = x + d * (u x) * (g x) with identity activation and a single expert.
        let (u, g, d, x) = (2.0, 0.5, 3.0, 1.5);
        let layer =
            MoeLayer::new(config(1, 1, 1, 1), vec![scalar_expert(u, g, d)], RouterWeights::zeros(1, 1)).unwrap();
        let mut tape = MoeTape::default();
        let y = layer.forward_record(&[x], &mut tape).unwrap();
        assert_eq!(y, vec![x + d * u * g * x * x]);
        let (dx, grads) = layer.backward(&tape, &[1.0]).unwrap();
        assert!((dx[0] - (1.0 + 2.0 * d * u * g * x)).abs() < 1e-12);
        let e = &grads.experts[0];
        assert!((e.w_up[(0, 0)] - d * g * x * x).abs() < 1e-12);
        assert!((e.w_gate[(0, 0)] - d * u * x * x).abs() < 1e-12);
        assert!((e.w_down[(0, 0)] - u * g * x * x).abs() < 1e-12);
        // A single selected expert always has gate 1, so the router gets nothing.
        assert_eq!(grads.router[(0, 0)], 0.0);
    }
}
