//! Behaviour shared by the standard and latent FFN layers.

use crate::error::{check_len, Result};
use crate::latent::MolaeLayer;
use crate::linalg::Matrix;
use crate::moe::MoeLayer;
use crate::router::{RouteDecision, RouterWeights};

/// A routed feed-forward layer `y = x + sum_{i selected} g_i(x) E_i(x)`.
pub trait FfnLayer {
    fn hidden_dim(&self) -> usize;
    fn intermediate_dim(&self) -> usize;
    fn expert_count(&self) -> usize;
    fn top_k(&self) -> usize;
    fn router(&self) -> &RouterWeights;

    /// `E_i(x)` for a 0-based expert id.
    fn expert_output(&self, expert: usize, x: &[f64]) -> Result<Vec<f64>>;

    /// Stored FFN weights, router excluded.
    fn census(&self) -> usize;

    fn route(&self, x: &[f64]) -> Result<RouteDecision> {
        self.router().route(x, self.top_k())
    }

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("layer input", self.hidden_dim(), x.len())?;
        let decision = self.route(x)?;
        let mut y = x.to_vec();
        for (&i, &g) in decision.indices.iter().zip(&decision.gates) {
            let e = self.expert_output(i, x)?;
            for (yi, ei) in y.iter_mut().zip(&e) {
                *yi += g * ei;
            }
        }
        Ok(y)
    }

    /// Row-wise forward of a `batch x hidden` matrix.
    fn forward_batch(&self, xs: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(xs.rows(), xs.cols());
        for r in 0..xs.rows() {
            let y = self.forward(xs.row(r))?;
            out.row_mut(r).copy_from_slice(&y);
        }
        Ok(out)
    }
}

/// Gradient containers expose their tensors in the same order as
/// [`Differentiable::parameters_mut`].
pub trait Gradients {
    fn tensors(&self) -> Vec<&Matrix>;

    fn tensors_mut(&mut self) -> Vec<&mut Matrix>;

    fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= alpha);
        }
    }
}

/// Layers with a recorded forward pass and a matching backward pass.
pub trait Differentiable: FfnLayer {
    type Tape: Default;
    type Grads: Gradients;

    /// Forward pass that records what the backward pass needs into `tape`.
    fn forward_record(&self, x: &[f64], tape: &mut Self::Tape) -> Result<Vec<f64>>;

    /// Adds the gradients of `<dy, forward(x)>` into `grads` and returns `dx`.
    fn backward_into(&self, tape: &Self::Tape, dy: &[f64], grads: &mut Self::Grads) -> Result<Vec<f64>>;

    fn zero_grads(&self) -> Self::Grads;

    fn parameters_mut(&mut self) -> Vec<&mut Matrix>;

    fn backward(&self, tape: &Self::Tape, dy: &[f64]) -> Result<(Vec<f64>, Self::Grads)> {
        let mut grads = self.zero_grads();
        let dx = self.backward_into(tape, dy, &mut grads)?;
        Ok((dx, grads))
    }
}

/// Either layer kind, as stored in a model container.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Moe(MoeLayer),
    Molae(MolaeLayer),
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Moe(_) => "moe",
            Layer::Molae(_) => "molae",
        }
    }

    fn inner(&self) -> &dyn FfnLayer {
        match self {
            Layer::Moe(l) => l,
            Layer::Molae(l) => l,
        }
    }
}

impl FfnLayer for Layer {
    fn hidden_dim(&self) -> usize {
        self.inner().hidden_dim()
    }
    fn intermediate_dim(&self) -> usize {
        self.inner().intermediate_dim()
    }
    fn expert_count(&self) -> usize {
        self.inner().expert_count()
    }
    fn top_k(&self) -> usize {
        self.inner().top_k()
    }
    fn router(&self) -> &RouterWeights {
        self.inner().router()
    }
    fn expert_output(&self, expert: usize, x: &[f64]) -> Result<Vec<f64>> {
        self.inner().expert_output(expert, x)
    }
    fn census(&self) -> usize {
        self.inner().census()
    }
}

impl From<MoeLayer> for Layer {
    fn from(l: MoeLayer) -> Self {
        Layer::Moe(l)
    }
}

impl From<MolaeLayer> for Layer {
    fn from(l: MolaeLayer) -> Self {
        Layer::Molae(l)
    }
}
