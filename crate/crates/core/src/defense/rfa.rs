use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::ParamVector;

use super::check_updates;

/// Smoothed Weiszfeld settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricMedian {
    pub smoothing: f64,
    pub max_iter: usize,
    /// Stop once `‖v' − v‖ / ‖v‖` falls below this.
    pub tolerance: f64,
}

impl Default for GeometricMedian {
    fn default() -> Self {
        Self {
            smoothing: 1e-6,
            max_iter: 100,
            tolerance: 1e-6,
        }
    }
}

fn objective(points: &[Vec<f64>], v: &[f64]) -> f64 {
    points
        .iter()
        .map(|p| p.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        .sum()
}

/// Geometric median by smoothed Weiszfeld iteration starting from the
/// coordinate-wise mean. Also returns the objective `Σ‖uᵢ − v‖` after each
/// iteration (first entry: the starting point).
pub fn geometric_median(updates: &[ParamVector], cfg: &GeometricMedian) -> Result<(ParamVector, Vec<f64>)> {
    check_updates(updates, 1, "geometric median")?;
    let points: Vec<Vec<f64>> = updates
        .iter()
        .map(|u| u.as_slice().iter().map(|v| *v as f64).collect())
        .collect();
    let d = points[0].len();
    let n = points.len() as f64;
    let mut v = vec![0f64; d];
    for p in &points {
        for (a, b) in v.iter_mut().zip(p) {
            *a += b / n;
        }
    }
    let mut history = vec![objective(&points, &v)];
    for _ in 0..cfg.max_iter {
        let weights: Vec<f64> = points
            .iter()
            .map(|p| {
                let dist = p.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                1.0 / dist.max(cfg.smoothing)
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let mut next = vec![0f64; d];
        for (p, w) in points.iter().zip(&weights) {
            for (a, b) in next.iter_mut().zip(p) {
                *a += w * b / total;
            }
        }
        let moved = next.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        v = next;
        history.push(objective(&points, &v));
        if moved / scale < cfg.tolerance {
            break;
        }
    }
    let out = v.into_iter().map(|a| a as f32).collect();
    Ok((updates[0].with_values(out)?, history))
}
