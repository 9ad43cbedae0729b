use std::collections::BTreeMap;

use crate::error::Result;
use crate::model::ParamVector;

use super::check_updates;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0f64, 0f64, 0f64);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa > 0.0 && bb > 0.0 {
        ab / (aa * bb).sqrt()
    } else {
        0.0
    }
}

/// FoolsGold weights from per-client aggregate histories: pairwise cosine
/// similarity, pardoning, `1 − max` similarity, rescaling and the logit
/// squash. Returned weights sum to one (uniform when every client is
/// zeroed out).
pub fn foolsgold_weights(histories: &[Vec<f64>]) -> Vec<f64> {
    let n = histories.len();
    if n == 0 {
        return Vec::new();
    }
    let mut cs = vec![vec![0f64; n]; n];
    for i in 0..n {
        for j in 0..n {
            cs[i][j] = if i == j { -1.0 } else { cosine(&histories[i], &histories[j]) };
        }
    }
    let maxcs: Vec<f64> = cs.iter().map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
    for i in 0..n {
        for j in 0..n {
            if i != j && maxcs[i] < maxcs[j] && maxcs[j] > 0.0 {
                cs[i][j] *= maxcs[i] / maxcs[j];
            }
        }
    }
    let mut wv: Vec<f64> = cs
        .iter()
        .map(|r| (1.0 - r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).clamp(0.0, 1.0))
        .collect();
    let top = wv.iter().copied().fold(0.0, f64::max);
    if top <= 0.0 {
        return vec![1.0 / n as f64; n];
    }
    for w in &mut wv {
        *w /= top;
        if *w >= 1.0 {
            *w = 0.99;
        }
        let logit = (*w / (1.0 - *w)).ln() + 0.5;
        *w = if logit.is_infinite() && logit > 0.0 || logit > 1.0 {
            1.0
        } else if logit.is_nan() || logit < 0.0 {
            0.0
        } else {
            logit
        };
    }
    let total: f64 = wv.iter().sum();
    if total <= 0.0 {
        return vec![1.0 / n as f64; n];
    }
    wv.iter().map(|w| w / total).collect()
}

/// FoolsGold with its per-client update history.
#[derive(Debug, Clone, Default)]
pub struct FoolsGold {
    history: BTreeMap<usize, Vec<f64>>,
}

impl FoolsGold {
    /// Add this round's updates to each client's history and weigh the
    /// participants.
    pub fn update_and_weigh(&mut self, ids: &[usize], updates: &[ParamVector]) -> Result<Vec<f64>> {
        check_updates(updates, 1, "foolsgold")?;
        if ids.len() != updates.len() {
            return Err(crate::error::invalid("foolsgold ids and updates differ in length"));
        }
        for (&id, u) in ids.iter().zip(updates) {
            let h = self.history.entry(id).or_insert_with(|| vec![0.0; u.len()]);
            for (a, v) in h.iter_mut().zip(u.as_slice()) {
                *a += *v as f64;
            }
        }
        let hs: Vec<Vec<f64>> = ids.iter().map(|id| self.history[id].clone()).collect();
        Ok(foolsgold_weights(&hs))
    }

    pub fn history(&self, id: usize) -> Option<&[f64]> {
        self.history.get(&id).map(|v| v.as_slice())
    }
}
