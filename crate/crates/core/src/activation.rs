use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Pointwise nonlinearity applied to the gate projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// `x * sigmoid(x)`
    #[default]
    Silu,
    Identity,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn code(self) -> u32 {
        match self {
            Activation::Silu => 0,
            Activation::Identity => 1,
            Activation::Relu => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Silu),
            1 => Some(Activation::Identity),
            2 => Some(Activation::Relu),
            _ => None,
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Silu => "silu",
            Activation::Identity => "identity",
            Activation::Relu => "relu",
        })
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "silu" | "swish" => Ok(Activation::Silu),
            "identity" | "linear" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            other => Err(format!("unknown activation `{other}`")),
        }
    }
}

/// `up ⊙ act(gate)`, the nonlinear core shared by every expert form.
pub(crate) fn gated(act: Activation, up: &[f64], gate: &[f64]) -> Vec<f64> {
    up.iter().zip(gate).map(|(u, g)| u * act.apply(*g)).collect()
}

/// Pulls `d(up ⊙ act(gate))` back to `(d_up, d_gate)`.
pub(crate) fn gated_backward(
    act: Activation,
    up: &[f64],
    gate: &[f64],
    dh: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut d_up = Vec::with_capacity(dh.len());
    let mut d_gate = Vec::with_capacity(dh.len());
    for ((u, g), d) in up.iter().zip(gate).zip(dh) {
        d_up.push(d * act.apply(*g));
        d_gate.push(d * u * act.derivative(*g));
    }
    (d_up, d_gate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silu_derivative_matches_central_difference() {
        for &x in &[-6.0, -1.3, -0.2, 0.0, 0.4, 2.5, 9.0] {
            let h = 1e-6;
            let fd = (Activation::Silu.apply(x + h) - Activation::Silu.apply(x - h)) / (2.0 * h);
            assert!((fd - Activation::Silu.derivative(x)).abs() < 1e-8, "x = {x}");
        }
    }

    #[test]
    fn codes_and_names_round_trip() {
        for a in [Activation::Silu, Activation::Identity, Activation::Relu] {
            assert_eq!(Activation::from_code(a.code()), Some(a));
            assert_eq!(a.to_string().parse::<Activation>().unwrap(), a);
        }
        assert_eq!(Activation::from_code(7), None);
    }
}
