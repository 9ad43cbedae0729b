use std::collections::BTreeSet;

use crate::error::{invalid, Result};
use crate::model::ParamVector;

use super::check_updates;

/// `|A ∩ B| / |A ∪ B|`; two empty sets count as identical.
pub fn jaccard(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        1.0
    } else {
        a.intersection(b).count() as f64 / union as f64
    }
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0f64; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. Two constant
/// inputs correlate perfectly; one constant input does not correlate.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0f64, 0f64, 0f64);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    match (va > 0.0, vb > 0.0) {
        (true, true) => cov / (va * vb).sqrt(),
        (false, false) => 1.0,
        _ => 0.0,
    }
}

struct Critical {
    importance: Vec<f64>,
    top: BTreeSet<usize>,
    bottom: BTreeSet<usize>,
}

fn critical(importance: Vec<f64>, k: usize) -> Critical {
    let mut order: Vec<usize> = (0..importance.len()).collect();
    order.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
    let top = order[..k].iter().copied().collect();
    let bottom = order[order.len() - k..].iter().copied().collect();
    Critical { importance, top, bottom }
}

fn similarity(a: &Critical, b: &Critical) -> f64 {
    let jac = 0.5 * (jaccard(&a.top, &b.top) + jaccard(&a.bottom, &b.bottom));
    let union: Vec<usize> = a.top.union(&b.top).copied().collect();
    let va: Vec<f64> = union.iter().map(|&i| a.importance[i]).collect();
    let vb: Vec<f64> = union.iter().map(|&i| b.importance[i]).collect();
    0.5 * (jac + spearman(&va, &vb))
}

/// Critical-parameter similarity weights. Importance is `|Δᵢ ⊙ θᵢ|` with
/// `θᵢ = φ + Δᵢ`; each client's score is its mean similarity to the others,
/// min-max normalized (all ones when every score is equal).
pub fn fedcpa_weights(global: &ParamVector, updates: &[ParamVector], k_frac: f64) -> Result<Vec<f64>> {
    check_updates(updates, 2, "fedcpa")?;
    global.check_layout(&updates[0])?;
    let dim = global.len();
    let k = ((k_frac * dim as f64).round() as usize).max(1);
    if 2 * k > dim || !(k_frac > 0.0) {
        return Err(invalid(format!("fedcpa k = {k} exceeds half of {dim} coordinates")));
    }
    let crit: Vec<Critical> = updates
        .iter()
        .map(|u| {
            let imp = u
                .as_slice()
                .iter()
                .zip(global.as_slice())
                .map(|(d, g)| (*d as f64 * (*g as f64 + *d as f64)).abs())
                .collect();
            critical(imp, k)
        })
        .collect();
    let n = crit.len();
    let mut scores = vec![0f64; n];
    for i in 0..n {
        for j in i + 1..n {
            let s = similarity(&crit[i], &crit[j]);
            scores[i] += s / (n - 1) as f64;
            scores[j] += s / (n - 1) as f64;
        }
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(if hi - lo > 1e-12 {
        scores.iter().map(|s| (s - lo) / (hi - lo)).collect()
    } else {
        vec![1.0; n]
    })
}
