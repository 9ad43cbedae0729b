use crate::error::Result;
use crate::model::{sq_distance, ParamVector};

use super::check_updates;

/// Krum score of each update: the sum of squared distances to its
/// `n − f − 2` nearest neighbours. The neighbourhood is clipped to
/// `[1, n − 1]` when `n < f + 3`.
pub fn krum_scores(updates: &[ParamVector], f: usize) -> Vec<f64> {
    let n = updates.len();
    let k = n.saturating_sub(f + 2).clamp(1, n.saturating_sub(1).max(1));
    let mut dist = vec![vec![0f64; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = sq_distance(updates[i].as_slice(), updates[j].as_slice());
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i][j]).collect();
            row.sort_unstable_by(|a, b| a.total_cmp(b));
            row.iter().take(k).sum()
        })
        .collect()
}

/// Average of the `m` lowest-scoring updates (ties by index). Returns the
/// average and the selected indices in ascending score order.
pub fn multi_krum(updates: &[ParamVector], f: usize, m: usize) -> Result<(ParamVector, Vec<usize>)> {
    check_updates(updates, 2, "multi-krum")?;
    let n = updates.len();
    let m = m.clamp(1, n);
    let scores = krum_scores(updates, f);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order.truncate(m);
    let d = updates[0].len();
    let mut acc = vec![0f64; d];
    for &i in &order {
        for (a, v) in acc.iter_mut().zip(updates[i].as_slice()) {
            *a += *v as f64;
        }
    }
    let avg = acc.into_iter().map(|a| (a / m as f64) as f32).collect();
    Ok((updates[0].with_values(avg)?, order))
}
