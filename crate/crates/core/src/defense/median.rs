use crate::error::{invalid, Result};
use crate::model::ParamVector;

use super::check_updates;

/// Apply `reduce` to each coordinate's column of client values.
fn per_coordinate(updates: &[ParamVector], mut reduce: impl FnMut(&mut [f64]) -> f64) -> Result<ParamVector> {
    let d = updates[0].len();
    let mut column = vec![0f64; updates.len()];
    let mut out = Vec::with_capacity(d);
    for j in 0..d {
        for (c, u) in column.iter_mut().zip(updates) {
            *c = u.as_slice()[j] as f64;
        }
        out.push(reduce(&mut column) as f32);
    }
    updates[0].with_values(out)
}

pub(crate) fn median_of(values: &mut [f64]) -> f64 {
    let n = values.len();
    let mid = n / 2;
    let (_, hi, _) = values.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    let hi = *hi;
    if n % 2 == 1 {
        hi
    } else {
        let lo = values[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

/// Coordinate-wise median; even counts average the two middle values.
pub fn coordinate_median(updates: &[ParamVector]) -> Result<ParamVector> {
    check_updates(updates, 1, "median")?;
    per_coordinate(updates, median_of)
}

/// Coordinate-wise mean after dropping the `k` smallest and `k` largest
/// values.
pub fn trimmed_mean(updates: &[ParamVector], k: usize) -> Result<ParamVector> {
    check_updates(updates, 1, "trimmed mean")?;
    let n = updates.len();
    if 2 * k >= n {
        return Err(invalid(format!("cannot trim {k} from each end of {n} values")));
    }
    per_coordinate(updates, |col| {
        col.sort_unstable_by(|a, b| a.total_cmp(b));
        let kept = &col[k..n - k];
        kept.iter().sum::<f64>() / kept.len() as f64
    })
}
