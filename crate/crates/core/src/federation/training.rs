use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attack::AdaptiveRegularizer;
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::model::{Architecture, BnMode, Hyperparams, Model, ParamVector, Sgd};

/// Local objective variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FedVariant {
    FedAvg,
    /// Adds `(μ/2)‖θ − φ‖²` to the local loss.
    FedProx { mu: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalTrainConfig {
    pub epochs: usize,
    pub hp: Hyperparams,
    pub variant: FedVariant,
}

/// Split a shuffled index list into minibatches. A trailing singleton batch
/// is merged into the previous one so batch statistics stay defined.
fn minibatches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size.max(1)).collect();
    if out.len() > 1 && out.last().map(|b| b.len()) == Some(1) {
        let n = out.len();
        let start = order.len() - out[n - 2].len() - 1;
        out.truncate(n - 2);
        out.push(&order[start..]);
    }
    out
}

/// Train from `global` on `data` and return `Δ = θ − φ`.
///
/// FedProx's proximal term is applied through its closed-form proximal step
/// after each SGD step, `θ ← (θ + lr·μ·φ) / (1 + lr·μ)`, which stays stable
/// for arbitrarily large `μ`.
pub fn local_train<R: Rng + ?Sized>(
    arch: &Arc<Architecture>,
    global: &ParamVector,
    data: &Dataset,
    cfg: &LocalTrainConfig,
    rng: &mut R,
    regularizer: Option<&AdaptiveRegularizer>,
) -> Result<ParamVector> {
    if cfg.epochs == 0 {
        return Err(invalid("local epochs must be >= 1"));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset("client has no samples".into()));
    }
    let mut model = Model::from_params(arch.clone(), global)?;
    let mask = arch.layout().trainable_mask();
    let mut sgd = Sgd::from_hyperparams(&cfg.hp);
    let anchor = global.as_slice();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for idx in minibatches(&order, cfg.hp.batch_size) {
            let (x, y) = data.batch(idx);
            let mode = if idx.len() >= 2 {
                BnMode::CurrentBatchStats
            } else {
                BnMode::RunningStats
            };
            let (_, mut grads, trace) = model.loss_and_grad(&x, &y, mode)?;
            if let Some(reg) = regularizer {
                let (_, reg_grads) = reg.value_and_grad(&model)?;
                for (g, r) in grads.iter_mut().zip(&reg_grads) {
                    *g += *r;
                }
            }
            if mode == BnMode::CurrentBatchStats {
                model.update_running_stats(&trace);
            }
            sgd.step(model.params_mut(), &grads, &mask);
            if let FedVariant::FedProx { mu } = cfg.variant {
                let k = cfg.hp.lr as f64 * mu;
                for ((p, a), m) in model.params_mut().iter_mut().zip(anchor).zip(&mask) {
                    if *m {
                        *p = ((*p as f64 + k * *a as f64) / (1.0 + k)) as f32;
                    }
                }
            }
        }
    }
    let delta = model.flatten_params().sub(global)?;
    if !delta.all_finite() {
        return Err(Error::NonFinite("local update".into()));
    }
    Ok(delta)
}
