use crate::error::{invalid, Result};
use crate::model::ParamVector;

/// `φᵗ⁺¹ = φᵗ + Σᵢ wᵢ·Δᵢ` with the weights applied as given.
pub fn weighted_aggregate(global: &ParamVector, updates: &[ParamVector], weights: &[f64]) -> Result<ParamVector> {
    if updates.len() != weights.len() {
        return Err(invalid(format!(
            "{} updates but {} weights",
            updates.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        return Err(invalid(format!("aggregation weight must be finite and >= 0, got {w}")));
    }
    let mut acc = vec![0f64; global.len()];
    for (u, &w) in updates.iter().zip(weights) {
        global.check_layout(u)?;
        if w == 0.0 {
            continue;
        }
        for (a, v) in acc.iter_mut().zip(u.as_slice()) {
            *a += w * *v as f64;
        }
    }
    let values = global
        .as_slice()
        .iter()
        .zip(&acc)
        .map(|(g, a)| (*g as f64 + a) as f32)
        .collect();
    global.with_values(values)
}

/// FedAvg weights `|Dᵢ| / Σ|Dⱼ|`.
pub fn size_weights(sizes: &[usize]) -> Vec<f64> {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return uniform_weights(sizes.len());
    }
    sizes.iter().map(|&s| s as f64 / total as f64).collect()
}

pub fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n.max(1) as f64; n]
}

/// Rescale non-negative weights to sum to one (uniform if they sum to zero).
pub fn normalize_weights(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        weights.iter().map(|w| w / total).collect()
    } else {
        uniform_weights(weights.len())
    }
}
