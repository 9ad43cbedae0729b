//! Relational distances and the score pipeline turning them into weights.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Pairwise Euclidean distances between the `M` embeddings of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    m: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    /// Wrap a precomputed row-major `m × m` matrix, checking that it is
    /// square, symmetric, finite and non-negative with a zero diagonal.
    pub fn from_raw(m: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != m * m {
            return Err(Error::ShapeMismatch {
                expected: vec![m, m],
                actual: vec![data.len()],
            });
        }
        for a in 0..m {
            for b in 0..m {
                let v = data[a * m + b];
                let ok = v.is_finite() && v >= 0.0 && v == data[b * m + a] && (a != b || v == 0.0);
                if !ok {
                    return Err(invalid(format!("entry ({a}, {b}) breaks the distance matrix invariants")));
                }
            }
        }
        Ok(Self { m, data })
    }

    pub fn size(&self) -> usize {
        self.m
    }

    pub fn get(&self, k1: usize, k2: usize) -> f64 {
        self.data[k1 * self.m + k2]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// `S[k1, k2] = ‖z_k1 − z_k2‖₂` over the flattened embeddings `[M, ..]`.
pub fn build_distance_matrix(embeddings: &Tensor) -> Result<DistanceMatrix> {
    let m = embeddings.batch();
    if m < 2 {
        return Err(Error::BatchTooSmall(m));
    }
    let mut data = vec![0f64; m * m];
    for k1 in 0..m {
        let a = embeddings.sample(k1);
        for k2 in k1 + 1..m {
            let d = a
                .iter()
                .zip(embeddings.sample(k2))
                .map(|(x, y)| {
                    let t = *x as f64 - *y as f64;
                    t * t
                })
                .sum::<f64>()
                .sqrt();
            data[k1 * m + k2] = d;
            data[k2 * m + k1] = d;
        }
    }
    Ok(DistanceMatrix { m, data })
}

/// Mean absolute entry-wise difference, diagonal included.
pub fn layer_distance(a: &DistanceMatrix, b: &DistanceMatrix) -> Result<f64> {
    if a.m != b.m {
        return Err(Error::ShapeMismatch {
            expected: vec![a.m, a.m],
            actual: vec![b.m, b.m],
        });
    }
    let total: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum();
    Ok(total / (a.m * a.m) as f64)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Anomaly of each client at one layer: the median of its layer distances
/// to every other client. `pairwise` is the symmetric `n × n` table.
pub fn anomaly_scores(pairwise: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = pairwise.len();
    if n < 2 {
        return Err(invalid(format!("anomaly scores need at least 2 clients, got {n}")));
    }
    Ok((0..n)
        .map(|i| {
            let mut others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| pairwise[i][j]).collect();
            median(&mut others)
        })
        .collect())
}

/// Min-max rescale to `[0, 1]`; all-equal input maps to 0.5 everywhere.
pub fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) || span <= 1e-12 * hi.abs().max(lo.abs()) {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
}

/// Normality from per-client, per-layer anomalies (`anomalies[i][l]`):
/// returns `(𝒩, 𝒩̃)` where `𝒩(i)` is the negated mean of the per-layer
/// min-max normalized anomalies and `𝒩̃` its min-max rescaling.
pub fn normality_scores(anomalies: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = anomalies.len();
    if n < 2 {
        return Err(invalid("normality needs at least 2 clients"));
    }
    let layers = anomalies[0].len();
    if layers == 0 || anomalies.iter().any(|a| a.len() != layers) {
        return Err(invalid("every client needs the same non-empty set of layer anomalies"));
    }
    let mut normality = vec![0f64; n];
    for l in 0..layers {
        let col: Vec<f64> = anomalies.iter().map(|a| a[l]).collect();
        for (acc, v) in normality.iter_mut().zip(min_max(&col)) {
            *acc -= v / layers as f64;
        }
    }
    let rescaled = min_max(&normality);
    Ok((normality, rescaled))
}

/// `clamp₀₁(ln(x / (1 − x)) + 0.5)` with its limits at `x ∈ {0, 1}`.
pub fn inverse_sigmoid_weight(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        ((x / (1.0 - x)).ln() + 0.5).clamp(0.0, 1.0)
    }
}

/// Final per-client weights `aᵢ` from `𝒩̃`: inverse sigmoid, then weight 1
/// for the `⌈n/2⌉` most normal clients, then weight 0 for the client with
/// the smallest pre-override weight. Ties go to the smaller client id,
/// except that the zero override avoids majority clients when tied.
pub fn weights_from_normality(normalized: &[f64], ids: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let n = normalized.len();
    let raw: Vec<f64> = normalized.iter().map(|&x| inverse_sigmoid_weight(x)).collect();
    let mut a = raw.clone();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&p, &q| normalized[q].total_cmp(&normalized[p]).then(ids[p].cmp(&ids[q])));
    let mut majority = vec![false; n];
    for &i in order.iter().take(n.div_ceil(2)) {
        a[i] = 1.0;
        majority[i] = true;
    }
    // Among tied minima prefer a client outside the majority, so the two
    // overrides select opposite rank ends whenever possible.
    let worst = (0..n).min_by(|&p, &q| {
        raw[p]
            .total_cmp(&raw[q])
            .then(majority[p].cmp(&majority[q]))
            .then(ids[p].cmp(&ids[q]))
    });
    if let Some(worst) = worst {
        a[worst] = 0.0;
    }
    (raw, a)
}

/// `𝒜(i) = aᵢ / |{j : aⱼ > 0}|`.
pub fn count_normalized(a: &[f64]) -> Vec<f64> {
    let positive = a.iter().filter(|&&x| x > 0.0).count();
    if positive == 0 {
        return vec![0.0; a.len()];
    }
    a.iter().map(|x| x / positive as f64).collect()
}

/// Every intermediate quantity of one scoring pass, indexed by position in
/// the round's participant list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBoard {
    pub client_ids: Vec<usize>,
    /// Layer indices of the tap points used.
    pub layers: Vec<usize>,
    /// `anomaly[i][l]`.
    pub anomaly: Vec<Vec<f64>>,
    pub normality: Vec<f64>,
    pub normalized: Vec<f64>,
    /// Inverse-sigmoid weights before the majority and zero overrides.
    pub raw_weights: Vec<f64>,
    pub weights: Vec<f64>,
    /// Count-normalized aggregation weights.
    pub aggregation: Vec<f64>,
}

impl ScoreBoard {
    /// Run the pipeline from per-layer pairwise distance tables
    /// (`pairwise[l][i][j]`).
    pub fn from_pairwise(client_ids: Vec<usize>, layers: Vec<usize>, pairwise: &[Vec<Vec<f64>>]) -> Result<Self> {
        let n = client_ids.len();
        let mut anomaly = vec![Vec::with_capacity(pairwise.len()); n];
        for table in pairwise {
            if table.len() != n {
                return Err(invalid("pairwise table size differs from client count"));
            }
            for (row, s) in anomaly.iter_mut().zip(anomaly_scores(table)?) {
                row.push(s);
            }
        }
        Self::from_anomalies(client_ids, layers, anomaly)
    }

    pub fn from_anomalies(client_ids: Vec<usize>, layers: Vec<usize>, anomaly: Vec<Vec<f64>>) -> Result<Self> {
        if anomaly.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("anomaly scores".into()));
        }
        let (normality, normalized) = normality_scores(&anomaly)?;
        let (raw_weights, weights) = weights_from_normality(&normalized, &client_ids);
        let aggregation = count_normalized(&weights);
        Ok(Self {
            client_ids,
            layers,
            anomaly,
            normality,
            normalized,
            raw_weights,
            weights,
            aggregation,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_four_five() {
        let t = Tensor::new(vec![2, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap();
        let s = build_distance_matrix(&t).unwrap();
        assert_eq!(s.get(0, 1), 5.0);
        assert_eq!(s.get(1, 0), 5.0);
        assert_eq!(s.get(0, 0), 0.0);
        let same = Tensor::new(vec![3, 2], vec![1.0; 6]).unwrap();
        assert!(build_distance_matrix(&same).unwrap().as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn layer_distance_arithmetic() {
        let a = DistanceMatrix { m: 2, data: vec![0.0, 2.0, 2.0, 0.0] };
        let b = DistanceMatrix { m: 2, data: vec![0.0; 4] };
        assert_eq!(layer_distance(&a, &b).unwrap(), 1.0);
        assert_eq!(layer_distance(&a, &a).unwrap(), 0.0);
        let c = DistanceMatrix { m: 1, data: vec![0.0] };
        assert!(layer_distance(&a, &c).is_err());
    }

    #[test]
    fn anomaly_excludes_self() {
        let t = vec![
            vec![0.0, 1.0, 2.0, 3.0],
            vec![1.0, 0.0, 1.0, 1.0],
            vec![2.0, 1.0, 0.0, 1.0],
            vec![3.0, 1.0, 1.0, 0.0],
        ];
        let s = anomaly_scores(&t).unwrap();
        assert_eq!(s[0], 2.0);
        assert_eq!(s[1], 1.0);
        assert!(anomaly_scores(&t[..1]).is_err());
    }

    #[test]
    fn two_point_normality() {
        let (n, nt) = normality_scores(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(n, vec![0.0, -1.0]);
        assert_eq!(nt, vec![1.0, 0.0]);
        let (_, flat) = normality_scores(&vec![vec![3.0, 1.0]; 4]).unwrap();
        assert_eq!(flat, vec![0.5; 4]);
    }

    #[test]
    fn inverse_sigmoid_limits() {
        assert_eq!(inverse_sigmoid_weight(0.5), 0.5);
        assert_eq!(inverse_sigmoid_weight(0.0), 0.0);
        assert_eq!(inverse_sigmoid_weight(1.0), 1.0);
    }

    #[test]
    fn four_client_weights() {
        let (raw, a) = weights_from_normality(&[0.0, 0.3, 0.7, 1.0], &[0, 1, 2, 3]);
        assert_eq!(raw, vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(a, vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(
            count_normalized(&[1.0, 1.0, 0.5, 0.0]),
            vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0, 0.0]
        );
    }

    #[test]
    fn degenerate_round() {
        let (_, a) = weights_from_normality(&[0.5; 5], &[4, 7, 1, 9, 3]);
        // Majority goes to ids 1, 3, 4; the forced zero to the lowest
        // remaining id, 7.
        assert_eq!(a, vec![1.0, 0.0, 1.0, 0.5, 1.0]);
        assert_eq!(count_normalized(&a).iter().sum::<f64>(), 3.5 / 4.0);
    }

    #[test]
    fn overrides_take_opposite_ends_on_ties() {
        let (raw, a) = weights_from_normality(&[0.135, 1.0, 0.0], &[0, 1, 2]);
        assert_eq!(raw, vec![0.0, 1.0, 0.0]);
        assert_eq!(a, vec![1.0, 1.0, 0.0]);
    }
}
