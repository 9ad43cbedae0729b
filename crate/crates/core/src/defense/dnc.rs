use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::ParamVector;

use super::check_updates;
use super::linalg::top_eigenvector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DncParams {
    pub iters: usize,
    /// Multiplier on `n_mal` giving the number removed per iteration.
    pub filter: f64,
    pub sub_dim: usize,
    pub n_mal: usize,
}

/// Outlier score of each row: squared projection of the centered row onto
/// the top right-singular vector of the centered matrix.
pub(crate) fn spectral_scores(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len();
    let d = rows[0].len();
    let mut mean = vec![0f64; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let mut gram = vec![0f64; n * n];
    for i in 0..n {
        for j in i..n {
            let g: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
            gram[i * n + j] = g;
            gram[j * n + i] = g;
        }
    }
    let (_, u) = top_eigenvector(&gram, n);
    // v = Xᵀu / ‖Xᵀu‖
    let mut v = vec![0f64; d];
    for (c, ui) in centered.iter().zip(&u) {
        for (a, b) in v.iter_mut().zip(c) {
            *a += ui * b;
        }
    }
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm <= 0.0 {
        return vec![0.0; n];
    }
    centered
        .iter()
        .map(|c| {
            let p: f64 = c.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / norm;
            p * p
        })
        .collect()
}

/// Divide-and-conquer filtering. Each iteration removes the `⌈c·n_mal⌉`
/// highest-scoring updates on a random coordinate subsample; the survivors
/// of every iteration are intersected and averaged.
pub fn dnc<R: Rng + ?Sized>(
    updates: &[ParamVector],
    p: &DncParams,
    rng: &mut R,
) -> Result<(ParamVector, Vec<usize>)> {
    check_updates(updates, 2, "dnc")?;
    let n = updates.len();
    let remove = (p.filter * p.n_mal as f64 - 1e-9).ceil().max(0.0) as usize;
    if remove >= n {
        return Err(invalid(format!("dnc would remove {remove} of {n} updates")));
    }
    let dim = updates[0].len();
    let mut keep = vec![true; n];
    for _ in 0..p.iters.max(1) {
        let coords: Vec<usize> = if p.sub_dim >= dim {
            (0..dim).collect()
        } else {
            let mut c = sample(rng, dim, p.sub_dim).into_vec();
            c.sort_unstable();
            c
        };
        let rows: Vec<Vec<f64>> = updates
            .iter()
            .map(|u| coords.iter().map(|&j| u.as_slice()[j] as f64).collect())
            .collect();
        let scores = spectral_scores(&rows);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        for &i in &order[..remove] {
            keep[i] = false;
        }
    }
    let kept: Vec<usize> = (0..n).filter(|&i| keep[i]).collect();
    if kept.is_empty() {
        return Err(invalid("dnc removed every update"));
    }
    let mut acc = vec![0f64; dim];
    for &i in &kept {
        for (a, v) in acc.iter_mut().zip(updates[i].as_slice()) {
            *a += *v as f64;
        }
    }
    let avg = acc.into_iter().map(|a| (a / kept.len() as f64) as f32).collect();
    Ok((updates[0].with_values(avg)?, kept))
}
