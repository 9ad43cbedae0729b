//! Hidden-unit permutations: distinct parameters, identical function.

use std::sync::Arc;

use fedmid::fedmid::{client_distance_matrices, score_updates, ProbeBatch};
use fedmid::model::{Architecture, BnMode, Model, ParamVector};
use fedmid::rng::SimRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

pub fn benign_round(arch: &Arc<Architecture>, seed: u64, n: usize) -> (ParamVector, Vec<ParamVector>) {
    let mut rng = SimRng::seed_from_u64(seed);
    let global = Model::init(arch.clone(), &mut rng).flatten_params();
    let mask = arch.layout().trainable_mask();
    let updates = (0..n)
        .map(|_| {
            let v = mask
                .iter()
                .map(|&t| if t { rng.random_range(-0.05f32..0.05) } else { 0.0 })
                .collect();
            global.with_values(v).unwrap()
        })
        .collect();
    (global, updates)
}

/// Apply a hidden-unit permutation to dense layer `first` (columns and bias),
/// any batch-norm state at `bn`, and the rows of dense layer `second`.
pub fn permute_hidden(model: &mut Model, first: usize, bn: Option<usize>, second: usize, perm: &[usize]) {
    let h = perm.len();
    let w1 = model.param(first, "weight").unwrap().to_vec();
    let fin = w1.len() / h;
    let dst = model.param_mut(first, "weight").unwrap();
    for i in 0..fin {
        for (k, &p) in perm.iter().enumerate() {
            dst[i * h + k] = w1[i * h + p];
        }
    }
    let mut names = vec![(first, "bias")];
    if let Some(bn) = bn {
        names.extend([(bn, "gamma"), (bn, "beta"), (bn, "running_mean"), (bn, "running_var")]);
    }
    for (layer, name) in names {
        let v = model.param(layer, name).unwrap().to_vec();
        let dst = model.param_mut(layer, name).unwrap();
        for (k, &p) in perm.iter().enumerate() {
            dst[k] = v[p];
        }
    }
    let w2 = model.param(second, "weight").unwrap().to_vec();
    let fout = w2.len() / h;
    let dst = model.param_mut(second, "weight").unwrap();
    for (k, &p) in perm.iter().enumerate() {
        dst[k * fout..(k + 1) * fout].copy_from_slice(&w2[p * fout..(p + 1) * fout]);
    }
}

/// Outcome of permuting one client's hidden units.
pub struct MappingCheck {
    /// Euclidean distance between the original and permuted parameters.
    pub param_distance: f64,
    /// Largest change of any post-block activation or logit.
    pub activation_change: f64,
    /// Largest change of any distance-matrix entry.
    pub matrix_change: f64,
    /// Largest change of the client's per-layer anomaly score.
    pub anomaly_change: f64,
}

/// Replace client 0's model in a 6-client round by a hidden-unit
/// permutation `(W₁P, PᵀW₂)` of itself and measure what changes.
pub fn functional_mapping(batchnorm: bool, seed: u64) -> Result<MappingCheck, String> {
    let arch = Architecture::mlp(&[10], [12, 8], 4, batchnorm).map_err(|e| e.to_string())?;
    let (global, mut updates) = benign_round(&arch, seed, 6);
    let (first, bn, second) = if batchnorm { (0, Some(1), 3) } else { (0, None, 2) };
    let theta = global.add(&updates[0]).map_err(|e| e.to_string())?;
    let mut model = Model::from_params(arch.clone(), &theta).map_err(|e| e.to_string())?;
    let mut perm: Vec<usize> = (0..12).collect();
    perm.shuffle(&mut SimRng::seed_from_u64(seed + 1));
    if perm.iter().enumerate().all(|(i, &p)| i == p) {
        perm.swap(0, 1);
    }
    permute_hidden(&mut model, first, bn, second, &perm);
    let permuted = model.flatten_params();
    let param_distance = permuted.distance(&theta);

    let probe = ProbeBatch::generate(arch.input_shape(), 200, 77).map_err(|e| e.to_string())?;
    let original = Model::from_params(arch.clone(), &theta).map_err(|e| e.to_string())?;
    let (a, b) = (
        original.forward_with_taps(&probe.tensor, BnMode::CurrentBatchStats).map_err(|e| e.to_string())?,
        model.forward_with_taps(&probe.tensor, BnMode::CurrentBatchStats).map_err(|e| e.to_string())?,
    );
    // Activations after the permuted block onwards.
    let mut activation_change = 0f64;
    for t in 1..a.embeddings.len() {
        for (x, y) in a.embeddings[t].data().iter().zip(b.embeddings[t].data()) {
            activation_change = activation_change.max((x - y).abs() as f64);
        }
    }
    let taps: Vec<usize> = (0..arch.taps().len()).collect();
    let ma = client_distance_matrices(&arch, &global, &updates[0], &probe.tensor, &taps).map_err(|e| e.to_string())?;
    let delta = permuted.sub(&global).map_err(|e| e.to_string())?;
    let mb = client_distance_matrices(&arch, &global, &delta, &probe.tensor, &taps).map_err(|e| e.to_string())?;
    let mut matrix_change = 0f64;
    for (x, y) in ma.iter().zip(&mb) {
        for (u, v) in x.as_slice().iter().zip(y.as_slice()) {
            matrix_change = matrix_change.max((u - v).abs());
        }
    }

    let ids: Vec<usize> = (0..6).collect();
    let before = score_updates(&arch, &global, &updates, &ids, &probe.tensor, None).map_err(|e| e.to_string())?;
    updates[0] = delta;
    let after = score_updates(&arch, &global, &updates, &ids, &probe.tensor, None).map_err(|e| e.to_string())?;
    let anomaly_change = before.anomaly[0]
        .iter()
        .zip(&after.anomaly[0])
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    Ok(MappingCheck {
        param_distance,
        activation_change,
        matrix_change,
        anomaly_change,
    })
}

