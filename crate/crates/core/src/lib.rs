//! Mixture-of-experts feed-forward layers, their latent-expert
//! reparameterization, and the tools to convert, count, store and verify them.

pub mod accounting;
pub mod activation;
pub mod container;
pub mod error;
pub mod generate;
pub mod latent;
pub mod layer;
pub mod linalg;
pub mod moe;
pub mod router;
pub mod train;
pub mod transform;

pub use activation::Activation;
pub use error::{Error, Result};
pub use latent::{MolaeConfig, MolaeLayer, OpMask, Operator};
pub use layer::{Differentiable, FfnLayer, Gradients, Layer};
pub use linalg::{LinalgError, Matrix};
pub use moe::{ExpertWeights, MoeConfig, MoeLayer};
pub use router::{RouteDecision, RouterWeights};
