//! Label-skewed client partitioning with Dirichlet class proportions.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub num_clients: usize,
    /// Dirichlet concentration; smaller is more heterogeneous.
    pub beta: f64,
    pub num_classes: usize,
    pub seed: u64,
}

/// Sample `Dir(β·1_n)` through normalized Gamma draws. Falls back to the
/// uniform vector if every draw underflows.
fn dirichlet<R: Rng + ?Sized>(beta: f64, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    let gamma = Gamma::new(beta, 1.0).map_err(|e| invalid(format!("gamma({beta}): {e}")))?;
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        Ok(draws.into_iter().map(|d| d / total).collect())
    } else {
        Ok(vec![1.0 / n as f64; n])
    }
}

/// Split `total` items by proportions `p`: cut points at `⌊total·Σp⌋`.
fn split_counts(p: &[f64], total: usize) -> Vec<usize> {
    let mut counts = Vec::with_capacity(p.len());
    let mut acc = 0.0;
    let mut prev = 0usize;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        let cut = if i + 1 == p.len() {
            total
        } else {
            ((acc * total as f64).floor() as usize).clamp(prev, total)
        };
        counts.push(cut - prev);
        prev = cut;
    }
    counts
}

/// Per-client sample indices. For every class, proportions are drawn from
/// `Dir(β·1_N)` and that class's shuffled samples are cut into consecutive
/// runs of those proportions. Clients left empty take one sample from the
/// currently largest client.
pub fn dirichlet_partition_indices(labels: &[usize], spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    let n = spec.num_clients;
    if n < 2 {
        return Err(invalid(format!("need at least 2 clients, got {n}")));
    }
    if !(spec.beta > 0.0) || !spec.beta.is_finite() {
        return Err(invalid(format!("dirichlet beta must be > 0, got {}", spec.beta)));
    }
    if labels.len() < n {
        return Err(invalid(format!(
            "dataset has {} samples, fewer than {n} clients",
            labels.len()
        )));
    }
    let mut rng = stream_rng(spec.seed, Stream::Partition, &[]);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); spec.num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= spec.num_classes {
            return Err(invalid(format!("label {l} exceeds class count {}", spec.num_classes)));
        }
        by_class[l].push(i);
    }
    let mut clients: Vec<Vec<usize>> = vec![Vec::new(); n];
    for members in by_class.iter_mut() {
        members.shuffle(&mut rng);
        let p = dirichlet(spec.beta, n, &mut rng)?;
        let mut start = 0;
        for (client, count) in split_counts(&p, members.len()).into_iter().enumerate() {
            clients[client].extend_from_slice(&members[start..start + count]);
            start += count;
        }
    }
    while let Some(empty) = clients.iter().position(|c| c.is_empty()) {
        let largest = (0..n)
            .max_by(|&a, &b| clients[a].len().cmp(&clients[b].len()).then(b.cmp(&a)))
            .expect("n >= 2");
        let moved = clients[largest].pop().expect("largest client is non-empty");
        clients[empty].push(moved);
    }
    for c in &mut clients {
        c.sort_unstable();
    }
    Ok(clients)
}

pub fn dirichlet_partition(dataset: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>> {
    if spec.num_classes != dataset.num_classes() {
        return Err(invalid(format!(
            "partition spec has {} classes, dataset has {}",
            spec.num_classes,
            dataset.num_classes()
        )));
    }
    let parts = dirichlet_partition_indices(dataset.labels(), spec)?;
    Ok(parts.iter().map(|idx| dataset.subset(idx)).collect())
}
