use crate::error::{invalid, Result};
use crate::model::ParamVector;

/// Coordinate-wise mean and population standard deviation of the updates.
pub fn benign_statistics(updates: &[ParamVector]) -> Result<(ParamVector, ParamVector)> {
    let first = updates
        .first()
        .ok_or_else(|| invalid("benign statistics need at least one update"))?;
    let n = updates.len() as f64;
    let d = first.len();
    let mut mean = vec![0f64; d];
    for u in updates {
        first.check_layout(u)?;
        for (m, v) in mean.iter_mut().zip(u.as_slice()) {
            *m += *v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0f64; d];
    for u in updates {
        for ((s, v), m) in var.iter_mut().zip(u.as_slice()).zip(&mean) {
            *s += (*v as f64 - m).powi(2);
        }
    }
    let std = var.iter().map(|s| (s / n).sqrt() as f32).collect();
    let mean = mean.into_iter().map(|m| m as f32).collect();
    Ok((first.with_values(mean)?, first.with_values(std)?))
}

/// `Δₐ = mean + z·std`, coordinate-wise. A negative `z` flips the direction.
pub fn lie_calibrate(mean: &ParamVector, std: &ParamVector, z: f64) -> Result<ParamVector> {
    mean.check_layout(std)?;
    if std.as_slice().iter().any(|s| !(*s >= 0.0)) {
        return Err(invalid("standard deviation must be non-negative"));
    }
    let values = mean
        .as_slice()
        .iter()
        .zip(std.as_slice())
        .map(|(m, s)| (*m as f64 + z * *s as f64) as f32)
        .collect();
    mean.with_values(values)
}

/// Project an update into the band `mean ± z·std`, coordinate-wise.
pub fn lie_clamp(update: &ParamVector, mean: &ParamVector, std: &ParamVector, z: f64) -> Result<ParamVector> {
    update.check_layout(mean)?;
    mean.check_layout(std)?;
    let z = z.abs();
    let values = update
        .as_slice()
        .iter()
        .zip(mean.as_slice())
        .zip(std.as_slice())
        .map(|((u, m), s)| {
            let lo = *m as f64 - z * *s as f64;
            let hi = *m as f64 + z * *s as f64;
            (*u as f64).clamp(lo, hi) as f32
        })
        .collect();
    update.with_values(values)
}
