use crate::error::{invalid, Result};
use crate::model::ParamVector;

use super::check_updates;
use super::median::median_of;

/// Confidence of one standardized residual: full weight inside the
/// `±confidence` interval, `confidence/|r|` outside it, and zero once that
/// factor drops below `clip`.
pub(crate) fn residual_confidence(r: f64, confidence: f64, clip: f64) -> f64 {
    let a = r.abs();
    if a <= confidence {
        1.0
    } else {
        let w = confidence / a;
        if w < clip || !w.is_finite() {
            0.0
        } else {
            w
        }
    }
}

/// Repeated-median fit `y ≈ a + b·x`; returns `(a, b)`.
fn repeated_median(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len();
    let mut slopes = Vec::with_capacity(n);
    let mut inner = Vec::with_capacity(n);
    for i in 0..n {
        inner.clear();
        inner.extend((0..n).filter(|&j| j != i).map(|j| (y[j] - y[i]) / (x[j] - x[i])));
        slopes.push(median_of(&mut inner));
    }
    let b = median_of(&mut slopes);
    let mut intercepts: Vec<f64> = x.iter().zip(y).map(|(xi, yi)| yi - b * xi).collect();
    (median_of(&mut intercepts), b)
}

/// Per coordinate, regress the sorted client values on their ranks with a
/// repeated-median line, standardize residuals by a MAD scale with leverage
/// correction, and return the confidence-weighted mean.
pub fn residual_base(updates: &[ParamVector], confidence: f64, clip: f64) -> Result<ParamVector> {
    check_updates(updates, 3, "residual_base")?;
    if !(confidence > 0.0) || !(0.0..1.0).contains(&clip) {
        return Err(invalid("residual_base needs confidence > 0 and clip in [0, 1)"));
    }
    let n = updates.len();
    let xs: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let x_mean = (n - 1) as f64 / 2.0;
    let sxx: f64 = xs.iter().map(|x| (x - x_mean).powi(2)).sum();
    let leverage: Vec<f64> = xs.iter().map(|x| 1.0 / n as f64 + (x - x_mean).powi(2) / sxx).collect();
    let d = updates[0].len();
    let mut out = Vec::with_capacity(d);
    let mut ys = vec![0f64; n];
    let mut scratch = vec![0f64; n];
    for j in 0..d {
        for (y, u) in ys.iter_mut().zip(updates) {
            *y = u.as_slice()[j] as f64;
        }
        ys.sort_unstable_by(|a, b| a.total_cmp(b));
        let (a, b) = repeated_median(&xs, &ys);
        let resid: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| y - (a + b * x)).collect();
        for (s, r) in scratch.iter_mut().zip(&resid) {
            *s = r.abs();
        }
        let scale = 1.4826 * median_of(&mut scratch);
        let tiny = 1e-12 * ys.iter().map(|v| v.abs()).fold(1.0, f64::max);
        let (mut num, mut den) = (0f64, 0f64);
        for i in 0..n {
            let e = resid[i];
            let r = if scale > tiny {
                e / (scale * (1.0 - leverage[i]).max(1e-12).sqrt())
            } else if e.abs() <= tiny {
                0.0
            } else {
                f64::INFINITY
            };
            let w = residual_confidence(r, confidence, clip);
            num += w * ys[i];
            den += w;
        }
        let v = if den > 0.0 { num / den } else { median_of(&mut ys) };
        out.push(v as f32);
    }
    updates[0].with_values(out)
}
