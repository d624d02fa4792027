//! Minimal full-batch training for regression smoke tests.

use serde::Serialize;

use crate::error::{check_len, Error, Result};
use crate::generate::probe_inputs;
use crate::layer::{Differentiable, FfnLayer, Gradients};
use crate::linalg::Matrix;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: Vec<&Matrix>) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::arg(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::arg("parameter list changed between steps"));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() {
                return Err(Error::Shape { what: "gradient".into(), expected: p.shape(), found: g.shape() });
            }
            let iter = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
            for (((w, &gi), mi), vi) in iter {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                *w -= self.lr * (update + self.weight_decay * *w);
            }
        }
        Ok(())
    }
}

/// Mean squared error over all outputs of a batch.
pub fn mse(pred: &Matrix, target: &Matrix) -> f64 {
    pred.sub(target).frobenius_norm_sq() / pred.data().len() as f64
}

/// Batch MSE and its gradient with respect to every parameter.
pub fn loss_and_grads<L: Differentiable>(layer: &L, xs: &Matrix, ys: &Matrix) -> Result<(f64, L::Grads)> {
    if xs.rows() != ys.rows() || xs.rows() == 0 {
        return Err(Error::arg(format!("{} inputs but {} targets", xs.rows(), ys.rows())));
    }
    check_len("target width", layer.hidden_dim(), ys.cols())?;
    let scale = 1.0 / (xs.rows() * ys.cols()) as f64;
    let mut grads = layer.zero_grads();
    let mut loss = 0.0;
    for r in 0..xs.rows() {
        let mut tape = L::Tape::default();
        let y = layer.forward_record(xs.row(r), &mut tape)?;
        let dy: Vec<f64> = y.iter().zip(ys.row(r)).map(|(p, t)| 2.0 * scale * (p - t)).collect();
        loss += y.iter().zip(ys.row(r)).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() * scale;
        layer.backward_into(&tape, &dy, &mut grads)?;
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 500, lr: 1e-2, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// `1 - final / initial`
    pub reduction: f64,
    pub losses: Vec<f64>,
}

/// Full-batch AdamW on `(xs, ys)`; `losses[t]` is the loss before step `t`.
pub fn train_regression<L: Differentiable>(
    layer: &mut L,
    xs: &Matrix,
    ys: &Matrix,
    config: &TrainConfig,
) -> Result<TrainSummary> {
    let mut opt = AdamW::new(config.lr).with_weight_decay(config.weight_decay);
    let mut losses = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let (loss, grads) = loss_and_grads(layer, xs, ys)?;
        if !loss.is_finite() {
            return Err(Error::arg(format!("loss diverged to {loss} at step {}", losses.len())));
        }
        losses.push(loss);
        opt.step(layer.parameters_mut(), grads.tensors())?;
    }
    let final_loss = mse(&layer.forward_batch(xs)?, ys);
    let initial_loss = losses.first().copied().unwrap_or(final_loss);
    Ok(TrainSummary {
        steps: config.steps,
        initial_loss,
        final_loss,
        reduction: if initial_loss > 0.0 { 1.0 - final_loss / initial_loss } else { 0.0 },
        losses,
    })
}

/// Seeded inputs and the teacher's outputs on them.
pub fn teacher_dataset(teacher: &dyn FfnLayer, samples: usize, seed: u64) -> Result<(Matrix, Matrix)> {
    let xs = probe_inputs(seed, samples, teacher.hidden_dim());
    let ys = teacher.forward_batch(&xs)?;
    Ok((xs, ys))
}
