//! Closed-form parameter and FLOP counts for standard and latent layers.
//!
//! Per operator, a standard expert stores `m*n` weights. A latent operator
//! stores an `m*m` map per expert plus one `m*n` projection per group; the
//! closed forms count groups as `floor(N / k)`. FLOPs follow the same terms
//! plus `2m` per expert for the gated product, with all `N` experts counted.
//! Router weights are never part of these totals.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{group_count, OpMask};
use crate::layer::{FfnLayer, Layer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub hidden: u64,
    pub intermediate: u64,
    pub experts: u64,
    pub group_size: u64,
    pub op_mask: OpMask,
    /// Active experts per token; only used by the active-expert extension.
    pub top_k: Option<u64>,
}

impl ArchSpec {
    pub fn new(hidden: u64, intermediate: u64, experts: u64, group_size: u64) -> Self {
        Self { hidden, intermediate, experts, group_size, op_mask: OpMask::ALL, top_k: None }
    }

    pub fn with_mask(mut self, op_mask: OpMask) -> Self {
        self.op_mask = op_mask;
        self
    }

    pub fn with_top_k(mut self, top_k: u64) -> Self {
        self.top_k = Some(top_k);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.intermediate == 0 || self.experts == 0 || self.group_size == 0 {
            return Err(Error::arg("n, m, N and k must all be positive"));
        }
        if self.group_size > self.experts {
            return Err(Error::arg(format!("group size {} exceeds expert count {}", self.group_size, self.experts)));
        }
        if let Some(k) = self.top_k {
            if k == 0 || k > self.experts {
                return Err(Error::arg(format!("top_k = {k} outside 1..={}", self.experts)));
            }
        }
        Ok(())
    }

    /// Spec of an existing layer; standard layers use `group_size` for the comparison.
    pub fn of_layer(layer: &Layer, group_size: u64) -> Self {
        let (k, mask) = match layer {
            Layer::Moe(_) => (group_size, OpMask::ALL),
            Layer::Molae(l) => (l.config().group_size as u64, l.config().op_mask),
        };
        Self {
            hidden: layer.hidden_dim() as u64,
            intermediate: layer.intermediate_dim() as u64,
            experts: layer.expert_count() as u64,
            group_size: k,
            op_mask: mask,
            top_k: Some(layer.top_k() as u64),
        }
    }

    fn floor_groups(&self) -> u64 {
        self.experts / self.group_size
    }

    fn ceil_groups(&self) -> u64 {
        group_count(self.experts as usize, self.group_size as usize) as u64
    }

    fn latent_ops(&self) -> u64 {
        self.op_mask.count() as u64
    }
}

/// `3 N m n`
pub fn moe_param_count(spec: &ArchSpec) -> u64 {
    3 * spec.experts * spec.intermediate * spec.hidden
}

/// `3 N m^2 + 3 floor(N/k) m n` for the full mask; dense operators count `N m n`.
pub fn molae_param_count(spec: &ArchSpec) -> u64 {
    molae_params_with_groups(spec, spec.floor_groups())
}

fn molae_params_with_groups(spec: &ArchSpec, groups: u64) -> u64 {
    let (n, m, e) = (spec.hidden, spec.intermediate, spec.experts);
    let latent = spec.latent_ops();
    latent * (e * m * m + groups * m * n) + (3 - latent) * e * m * n
}

/// `(3 m n + 2 m) N`
pub fn moe_flops(spec: &ArchSpec) -> u64 {
    (3 * spec.intermediate * spec.hidden + 2 * spec.intermediate) * spec.experts
}

/// `(3 m^2 + 2 m) N + 3 floor(N/k) m n` for the full mask.
pub fn molae_flops(spec: &ArchSpec) -> u64 {
    let (n, m, e) = (spec.hidden, spec.intermediate, spec.experts);
    let latent = spec.latent_ops();
    latent * (e * m * m + spec.floor_groups() * m * n) + (3 - latent) * e * m * n + 2 * m * e
}

/// Stored FFN weights of a constructed layer, router excluded.
pub fn census(layer: &Layer) -> u64 {
    layer.census() as u64
}

/// FLOPs when only the `top_k` selected experts run. The latent figure is an
/// upper bound that assumes every selected expert sits in a distinct group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActiveCost {
    pub top_k: u64,
    pub moe_flops: u64,
    pub molae_flops_upper: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub spec: ArchSpec,
    pub moe_params: u64,
    pub molae_params: u64,
    pub moe_flops: u64,
    pub molae_flops: u64,
    /// `molae_params / moe_params`
    pub param_ratio: f64,
    /// `molae_flops / moe_flops`
    pub flop_ratio: f64,
    /// Latent parameters with `ceil(N/k)` groups, as actually stored.
    pub molae_params_stored: u64,
    /// False when `k` does not divide `N`, so the floor-based closed form
    /// undercounts the stored projections.
    pub closed_form_matches_storage: bool,
    pub router_params: u64,
    pub moe_bytes_f32: u64,
    pub molae_bytes_f32: u64,
    /// Extension: only active experts counted.
    pub active: Option<ActiveCost>,
}

pub fn cost_report(spec: &ArchSpec) -> Result<CostReport> {
    spec.validate()?;
    let moe_params = moe_param_count(spec);
    let molae_params = molae_param_count(spec);
    let moe_f = moe_flops(spec);
    let molae_f = molae_flops(spec);
    let stored = molae_params_with_groups(spec, spec.ceil_groups());
    let active = spec.top_k.map(|k| {
        let (n, m) = (spec.hidden, spec.intermediate);
        let latent = spec.latent_ops();
        let touched = k.min(spec.ceil_groups());
        ActiveCost {
            top_k: k,
            moe_flops: (3 * m * n + 2 * m) * k,
            molae_flops_upper: latent * (k * m * m + touched * m * n) + (3 - latent) * k * m * n + 2 * m * k,
        }
    });
    Ok(CostReport {
        spec: *spec,
        moe_params,
        molae_params,
        moe_flops: moe_f,
        molae_flops: molae_f,
        param_ratio: molae_params as f64 / moe_params as f64,
        flop_ratio: molae_f as f64 / moe_f as f64,
        molae_params_stored: stored,
        closed_form_matches_storage: stored == molae_params,
        router_params: spec.experts * spec.hidden,
        moe_bytes_f32: 4 * moe_params,
        molae_bytes_f32: 4 * stored,
        active,
    })
}

impl CostReport {
    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let s = &self.spec;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "n = {}, m = {}, N = {}, k = {}, ops = {}",
            s.hidden, s.intermediate, s.experts, s.group_size, s.op_mask
        );
        let _ = writeln!(out, "{:<14} {:>16} {:>16}", "architecture", "parameters", "flops/forward");
        let _ = writeln!(out, "{:<14} {:>16} {:>16}", "moe", group_digits(self.moe_params), group_digits(self.moe_flops));
        let _ =
            writeln!(out, "{:<14} {:>16} {:>16}", "molae", group_digits(self.molae_params), group_digits(self.molae_flops));
        let _ = writeln!(out, "{:<14} {:>16.4} {:>16.4}", "ratio", self.param_ratio, self.flop_ratio);
        let _ = writeln!(out, "router parameters (excluded): {}", group_digits(self.router_params));
        if !self.closed_form_matches_storage {
            let _ = writeln!(
                out,
                "note: k does not divide N; stored latent parameters = {}",
                group_digits(self.molae_params_stored)
            );
        }
        if let Some(a) = &self.active {
            let _ = writeln!(
                out,
                "active-expert flops (top_k = {}): moe {}, molae <= {}",
                a.top_k,
                group_digits(a.moe_flops),
                group_digits(a.molae_flops_upper)
            );
        }
        out
    }
}

fn group_digits(v: u64) -> String {
    let s = v.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}
