//! Linear top-k router: softmax over `w_router * x`, keep the `top_k` most
//! probable experts (lower index wins ties), renormalize their gates.
//!
//! Gradients treat the selected set as fixed and differentiate the gate
//! values only.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::{dot, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct RouterWeights {
    /// Logit projection, `experts x hidden`.
    pub w_router: Matrix,
}

/// Selected experts (0-based ids, most probable first) and their gates.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteDecision {
    pub indices: Vec<usize>,
    pub gates: Vec<f64>,
    /// Full softmax distribution over all experts.
    pub probs: Vec<f64>,
}

impl RouterWeights {
    pub fn new(w_router: Matrix) -> Self {
        Self { w_router }
    }

    pub fn zeros(experts: usize, hidden: usize) -> Self {
        Self { w_router: Matrix::zeros(experts, hidden) }
    }

    pub fn experts(&self) -> usize {
        self.w_router.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w_router.cols()
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("router input", self.hidden(), x.len())?;
        Ok(self.w_router.matvec(x))
    }

    pub fn route(&self, x: &[f64], top_k: usize) -> Result<RouteDecision> {
        if top_k == 0 || top_k > self.experts() {
            return Err(Error::arg(format!("top_k = {top_k} outside 1..={}", self.experts())));
        }
        Ok(route_logits(&self.logits(x)?, top_k))
    }

    /// Accumulates the router gradient for one routed input and returns the
    /// contribution to `dx`. `d_gates[j]` is `dL/dg` for `decision.indices[j]`.
    pub(crate) fn backward_into(
        &self,
        x: &[f64],
        decision: &RouteDecision,
        d_gates: &[f64],
        grad: &mut Matrix,
        dx: &mut [f64],
    ) {
        // g = softmax restricted to the selected logits.
        let mean: f64 = decision.gates.iter().zip(d_gates).map(|(g, d)| g * d).sum();
        for ((&idx, &g), &dg) in decision.indices.iter().zip(&decision.gates).zip(d_gates) {
            let dz = g * (dg - mean);
            if dz == 0.0 {
                continue;
            }
            for (o, xi) in grad.row_mut(idx).iter_mut().zip(x) {
                *o += dz * xi;
            }
            for (o, w) in dx.iter_mut().zip(self.w_router.row(idx)) {
                *o += dz * w;
            }
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Routing decision from precomputed logits.
pub fn route_logits(logits: &[f64], top_k: usize) -> RouteDecision {
    let probs = softmax(logits);
    let mut order: Vec<usize> = (0..logits.len()).collect();
    // Stable: equal logits keep ascending index order.
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap_or(std::cmp::Ordering::Equal));
    order.truncate(top_k);
    let mass: f64 = order.iter().map(|&i| probs[i]).sum();
    let gates = order.iter().map(|&i| probs[i] / mass).collect();
    RouteDecision { indices: order, gates, probs }
}

/// Per-expert traffic accumulated over a batch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RouteStats {
    /// Times each expert was selected.
    pub selections: Vec<u64>,
    /// Sum of router probabilities per expert.
    pub prob_mass: Vec<f64>,
    pub tokens: u64,
}

impl RouteStats {
    pub fn new(experts: usize) -> Self {
        Self { selections: vec![0; experts], prob_mass: vec![0.0; experts], tokens: 0 }
    }

    pub fn record(&mut self, decision: &RouteDecision) {
        for &i in &decision.indices {
            self.selections[i] += 1;
        }
        for (m, p) in self.prob_mass.iter_mut().zip(&decision.probs) {
            *m += p;
        }
        self.tokens += 1;
    }

    /// Fraction of all selections that went to each expert.
    pub fn frequencies(&self) -> Vec<f64> {
        let total: u64 = self.selections.iter().sum();
        self.selections.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
    }

    /// Mean router probability per expert.
    pub fn mean_probs(&self) -> Vec<f64> {
        self.prob_mass.iter().map(|m| m / self.tokens.max(1) as f64).collect()
    }
}

/// Auxiliary balance loss `N * sum_i f_i * P_i`; exactly 1 under uniform routing.
pub fn aux_load_balance_loss(stats: &RouteStats) -> Result<f64> {
    if stats.tokens == 0 {
        return Err(Error::arg("load-balance loss over an empty batch"));
    }
    load_balance_loss(&stats.frequencies(), &stats.mean_probs())
}

/// `N * sum_i f_i * P_i` from explicit frequencies and mean gate mass.
pub fn load_balance_loss(frequencies: &[f64], mean_probs: &[f64]) -> Result<f64> {
    if frequencies.is_empty() {
        return Err(Error::arg("load-balance loss needs at least one expert"));
    }
    check_len("mean gate mass", frequencies.len(), mean_probs.len())?;
    Ok(frequencies.len() as f64 * dot(frequencies, mean_probs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_router_splits_evenly() {
        let r = RouterWeights::zeros(2, 3);
        let d = r.route(&[1.0, -1.0, 2.0], 2).unwrap();
        assert_eq!(d.indices, vec![0, 1]);
        assert_eq!(d.gates, vec![0.5, 0.5]);
    }

    #[test]
    fn dominant_logit_wins() {
        let d = route_logits(&[0.0, 0.0, 5.0, 0.0], 1);
        assert_eq!(d.indices, vec![2]);
        assert_eq!(d.gates, vec![1.0]);
    }

    #[test]
    fn renormalized_pair_matches_hand_softmax() {
        let d = route_logits(&[1.0, 2.0, 3.0], 2);
        assert_eq!(d.indices, vec![2, 1]);
        let e3 = 3f64.exp();
        let e2 = 2f64.exp();
        assert!((d.gates[0] - e3 / (e3 + e2)).abs() < 1e-15);
        assert!((d.gates[1] - e2 / (e3 + e2)).abs() < 1e-15);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let d = route_logits(&[1.0, 3.0, 3.0, 3.0], 2);
        assert_eq!(d.indices, vec![1, 2]);
    }

    #[test]
    fn rejects_bad_top_k() {
        let r = RouterWeights::zeros(3, 2);
        assert!(r.route(&[0.0, 0.0], 0).is_err());
        assert!(r.route(&[0.0, 0.0], 4).is_err());
        assert!(r.route(&[0.0], 1).is_err());
    }

    #[test]
    fn balance_loss_fixed_points() {
        let n = 4;
        let uniform = vec![1.0 / n as f64; n];
        assert!((load_balance_loss(&uniform, &uniform).unwrap() - 1.0).abs() < 1e-15);
        let mut one_hot = vec![0.0; n];
        one_hot[2] = 1.0;
        assert_eq!(load_balance_loss(&one_hot, &one_hot).unwrap(), n as f64);
        let v = load_balance_loss(&[0.75, 0.25], &[0.75, 0.25]).unwrap();
        assert!((v - 1.25).abs() < 1e-15);
    }

    #[test]
    fn balance_loss_from_stats() {
        let mut stats = RouteStats::new(2);
        assert!(aux_load_balance_loss(&stats).is_err());
        stats.record(&route_logits(&[0.0, 0.0], 1));
        stats.record(&route_logits(&[-1.0, 1.0], 1));
        // f = [0.5, 0.5]; P averages [0.5,0.5] and softmax([-1,1]).
        let loss = aux_load_balance_loss(&stats).unwrap();
        let p1 = softmax(&[-1.0, 1.0]);
        let expected = 2.0 * (0.5 * (0.5 + p1[0]) / 2.0 + 0.5 * (0.5 + p1[1]) / 2.0);
        assert!((loss - expected).abs() < 1e-15);
    }
}
