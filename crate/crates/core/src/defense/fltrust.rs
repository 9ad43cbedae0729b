use crate::error::{invalid, Result};
use crate::model::ParamVector;

use super::check_updates;

/// Trust-weighted combination of updates rescaled to the server update's
/// norm. Returns the aggregate and the ReLU-clipped cosine trust scores.
pub fn fltrust(updates: &[ParamVector], server: &ParamVector) -> Result<(ParamVector, Vec<f64>)> {
    check_updates(updates, 1, "fltrust")?;
    updates[0].check_layout(server)?;
    let g0 = server.norm();
    if !(g0 > 0.0) {
        return Err(invalid("fltrust server update has zero norm"));
    }
    let d = server.len();
    let mut acc = vec![0f64; d];
    let mut scores = Vec::with_capacity(updates.len());
    for u in updates {
        let n = u.norm();
        let ts = if n > 0.0 { (u.dot(server) / (n * g0)).max(0.0) } else { 0.0 };
        scores.push(ts);
        if ts > 0.0 {
            let k = ts * g0 / n;
            for (a, v) in acc.iter_mut().zip(u.as_slice()) {
                *a += k * *v as f64;
            }
        }
    }
    let total: f64 = scores.iter().sum();
    let out = if total > 0.0 {
        acc.into_iter().map(|a| (a / total) as f32).collect()
    } else {
        vec![0.0; d]
    };
    Ok((server.with_values(out)?, scores))
}
