use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Optimizer hyperparameters shared by clients and the server.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-5,
            batch_size: 64,
        }
    }
}

/// Momentum SGD with L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<f32>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn from_hyperparams(hp: &Hyperparams) -> Self {
        Self::new(hp.lr, hp.momentum, hp.weight_decay)
    }

    /// Update the coordinates flagged in `trainable`; the rest are left alone.
    pub fn step(&mut self, params: &mut [f32], grads: &[f32], trainable: &[bool]) {
        if self.velocity.len() != params.len() {
            self.velocity = vec![0.0; params.len()];
        }
        let (lr, mu, wd) = (self.lr as f64, self.momentum as f64, self.weight_decay as f64);
        for i in 0..params.len() {
            if !trainable[i] {
                continue;
            }
            let w = params[i] as f64;
            let g = grads[i] as f64 + wd * w;
            let v = mu * self.velocity[i] as f64 + g;
            self.velocity[i] = v as f32;
            params[i] = (w - lr * v) as f32;
        }
    }
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let n = logits.batch();
    let c = logits.sample_len();
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            expected: vec![n],
            actual: vec![labels.len()],
        });
    }
    let mut grad = vec![0f32; n * c];
    let mut loss = 0f64;
    for (s, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let row = logits.sample(s);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v as f64));
        let exps: Vec<f64> = row.iter().map(|v| (*v as f64 - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() + max - row[label] as f64;
        for k in 0..c {
            let p = exps[k] / z;
            let t = if k == label { 1.0 } else { 0.0 };
            grad[s * c + k] = ((p - t) / n as f64) as f32;
        }
    }
    let loss = loss / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss".into()));
    }
    Ok((loss, Tensor::new(vec![n, c], grad)?))
}
