use serde::Serialize;

use crate::error::{Error, Result};
use crate::generate::probe_inputs;
use crate::layer::FfnLayer;
use crate::linalg::norm;

/// Output deviation of `b` from `a` over seeded probes.
///
/// The deviation of one probe is `||y_a - y_b|| / ||y_a - x||`: the residual
/// path cancels in the difference, so it is measured against the FFN
/// contribution of `a` alone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeviationStats {
    pub probes: usize,
    pub max_rel: f64,
    pub mean_rel: f64,
    /// Fraction of probes for which both layers selected the same experts.
    pub routing_agreement: f64,
}

pub fn verify_equivalence(a: &dyn FfnLayer, b: &dyn FfnLayer, probes: usize, seed: u64) -> Result<DeviationStats> {
    let dims = |l: &dyn FfnLayer| (l.hidden_dim(), l.expert_count(), l.top_k());
    if dims(a) != dims(b) {
        return Err(Error::arg(format!(
            "layers differ in (hidden, experts, top_k): {:?} vs {:?}",
            dims(a),
            dims(b)
        )));
    }
    if probes == 0 {
        return Err(Error::arg("at least one probe is required"));
    }
    let xs = probe_inputs(seed, probes, a.hidden_dim());
    let (mut max_rel, mut sum_rel, mut agree) = (0.0f64, 0.0, 0usize);
    for r in 0..probes {
        let x = xs.row(r);
        let ya = a.forward(x)?;
        let yb = b.forward(x)?;
        let diff: Vec<f64> = ya.iter().zip(&yb).map(|(p, q)| p - q).collect();
        let ffn: Vec<f64> = ya.iter().zip(x).map(|(p, q)| p - q).collect();
        let rel = norm(&diff) / norm(&ffn).max(f64::MIN_POSITIVE);
        max_rel = max_rel.max(rel);
        sum_rel += rel;
        if a.route(x)?.indices == b.route(x)?.indices {
            agree += 1;
        }
    }
    Ok(DeviationStats {
        probes,
        max_rel,
        mean_rel: sum_rel / probes as f64,
        routing_agreement: agree as f64 / probes as f64,
    })
}
