//! Divergence diagnostics: clients trained from one initialization drift
//! apart in parameter space much faster than in function space.

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::experiment::load_data;
use crate::attack::{poison_targeted, poison_untargeted};
use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::federation::{local_train, FedVariant, LocalTrainConfig};
use crate::fedmid::{client_distance_matrices, layer_distance, DistanceMatrix};
use crate::model::{Model, ParamVector};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochDiagnostics {
    pub epoch: usize,
    /// Mean pairwise Euclidean parameter distance among benign clients.
    pub param_distance: f64,
    /// Mean pairwise relational distance (averaged over taps) among benign
    /// clients.
    pub relational_distance: f64,
    /// Distances relative to the first epoch.
    pub param_relative: f64,
    pub relational_relative: f64,
    /// `dist_b / dist_{b,m}` under each metric; present with attackers.
    pub param_ratio: Option<f64>,
    pub relational_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerVariance {
    pub layer: usize,
    pub name: String,
    /// Across-client variance of the accumulated update, averaged over the
    /// block's coordinates.
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseReport {
    pub benign: usize,
    pub attackers: usize,
    pub epochs: Vec<EpochDiagnostics>,
    pub layer_variance: Vec<LayerVariance>,
}

fn mean_pairs(items: &[usize], other: Option<&[usize]>, dist: &dyn Fn(usize, usize) -> f64) -> Option<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    match other {
        None => {
            for (a, &i) in items.iter().enumerate() {
                for &j in &items[a + 1..] {
                    total += dist(i, j);
                    count += 1;
                }
            }
        }
        Some(others) => {
            for &i in items {
                for &j in others {
                    total += dist(i, j);
                    count += 1;
                }
            }
        }
    }
    (count > 0).then(|| total / count as f64)
}

/// Train `diagnose_clients` clients on one shared dataset from one
/// initialization and track how they diverge epoch by epoch. Attackers
/// (per `attack`/`attacker_ratio`) train on a poisoned copy. The relational
/// probe is held-out test data.
pub fn diagnose_divergence(cfg: &ExperimentConfig) -> Result<DiagnoseReport> {
    cfg.validate()?;
    let arch = cfg.architecture()?;
    let (train, test) = load_data(cfg)?;
    let n = cfg.diagnose_clients;
    let k = cfg.diagnose_samples.min(train.len());
    let shared: Dataset = train.subset(&(0..k).collect::<Vec<_>>());
    let attackers = if cfg.attack.is_attack() {
        ((cfg.attacker_ratio * n as f64).round() as usize).min(n - 2)
    } else {
        0
    };
    let benign: Vec<usize> = (0..n - attackers).collect();
    let malicious: Vec<usize> = (n - attackers..n).collect();
    let attack = cfg.attack_config();
    let data: Vec<Dataset> = (0..n)
        .map(|i| {
            if i < n - attackers {
                return Ok(shared.clone());
            }
            let mut rng = stream_rng(cfg.seed, Stream::Poison, &[i as u64]);
            if attack.scenario.is_targeted() {
                poison_targeted(&shared, attack.pollution_ratio, &attack.trigger, &mut rng)
            } else {
                poison_untargeted(&shared, attack.pollution_ratio, &mut rng)
            }
        })
        .collect::<Result<_>>()?;
    let probe_n = cfg.probe_samples.min(test.len());
    if probe_n < 2 {
        return Err(invalid("diagnosis needs at least 2 held-out probe samples"));
    }
    let (probe, _) = test.batch(&(0..probe_n).collect::<Vec<_>>());
    let taps: Vec<usize> = match &cfg.fedmid_taps {
        Some(t) => t.clone(),
        None => (0..arch.taps().len()).collect(),
    };

    let init = Model::init(arch.clone(), &mut stream_rng(cfg.seed, Stream::Init, &[])).flatten_params();
    let train_cfg = LocalTrainConfig {
        epochs: 1,
        variant: FedVariant::FedAvg,
        ..cfg.train_config()
    };
    let mut rngs: Vec<_> = (0..n)
        .map(|i| {
            let id = if cfg.diagnose_shuffle { i as u64 } else { 0 };
            stream_rng(cfg.seed, Stream::Diagnose, &[id])
        })
        .collect();
    let mut params: Vec<ParamVector> = vec![init.clone(); n];
    let zero = init.with_values(vec![0.0; init.len()])?;
    let mut epochs = Vec::with_capacity(cfg.diagnose_epochs);
    for epoch in 1..=cfg.diagnose_epochs {
        for i in 0..n {
            let delta = local_train(&arch, &params[i], &data[i], &train_cfg, &mut rngs[i], None)?;
            params[i] = params[i].add(&delta)?;
        }
        let mats: Vec<Vec<DistanceMatrix>> = params
            .iter()
            .map(|p| client_distance_matrices(&arch, p, &zero, &probe, &taps))
            .collect::<Result<_>>()?;
        let pdist = |i: usize, j: usize| params[i].distance(&params[j]);
        let rdist = |i: usize, j: usize| {
            mats[i]
                .iter()
                .zip(&mats[j])
                .map(|(a, b)| layer_distance(a, b).unwrap_or(f64::NAN))
                .sum::<f64>()
                / taps.len() as f64
        };
        let param_distance = mean_pairs(&benign, None, &pdist).unwrap_or(0.0);
        let relational_distance = mean_pairs(&benign, None, &rdist).unwrap_or(0.0);
        let ratio = |d: &dyn Fn(usize, usize) -> f64, within: f64| {
            mean_pairs(&benign, Some(&malicious), d).map(|across| if across > 0.0 { within / across } else { f64::NAN })
        };
        let param_ratio = ratio(&pdist, param_distance);
        let relational_ratio = ratio(&rdist, relational_distance);
        let (p0, r0) = epochs
            .first()
            .map(|e: &EpochDiagnostics| (e.param_distance, e.relational_distance))
            .unwrap_or((param_distance, relational_distance));
        let rel = |v: f64, base: f64| if base > 0.0 { v / base } else if v == 0.0 { 1.0 } else { f64::INFINITY };
        epochs.push(EpochDiagnostics {
            epoch,
            param_distance,
            relational_distance,
            param_relative: rel(param_distance, p0),
            relational_relative: rel(relational_distance, r0),
            param_ratio,
            relational_ratio,
        });
    }

    let layer_variance = arch
        .layout()
        .entries()
        .iter()
        .filter(|e| e.trainable)
        .map(|e| {
            let m = benign.len() as f64;
            let mut total = 0.0;
            for j in e.range() {
                let vals: Vec<f64> = benign.iter().map(|&i| (params[i].as_slice()[j] - init.as_slice()[j]) as f64).collect();
                let mean = vals.iter().sum::<f64>() / m;
                total += vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
            }
            LayerVariance {
                layer: e.layer,
                name: e.name.clone(),
                variance: total / e.len().max(1) as f64,
            }
        })
        .collect();
    Ok(DiagnoseReport {
        benign: benign.len(),
        attackers,
        epochs,
        layer_variance,
    })
}
