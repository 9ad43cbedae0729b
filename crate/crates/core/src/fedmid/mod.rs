//! Functional-mapping defense: clients are compared through the relational
//! structure of their intermediate outputs on a shared synthetic probe
//! batch rather than through their parameters.

mod scores;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use scores::{
    anomaly_scores, build_distance_matrix, count_normalized, inverse_sigmoid_weight, layer_distance, min_max,
    normality_scores, weights_from_normality, DistanceMatrix, ScoreBoard,
};

use crate::defense::{Aggregate, AggregatorOutput, AggregatorPlugin};
use crate::error::{invalid, Result};
use crate::federation::RoundContext;
use crate::model::{Architecture, BnMode, Model, ParamVector};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

/// Synthetic standard-normal inputs shared by every client in a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeBatch {
    pub seed: u64,
    pub tensor: Tensor,
}

impl ProbeBatch {
    pub fn generate(input_shape: &[usize], samples: usize, seed: u64) -> Result<Self> {
        if samples < 2 {
            return Err(invalid("probe batch needs at least 2 samples"));
        }
        let mut rng = stream_rng(seed, Stream::Probe, &[]);
        let len = samples * input_shape.iter().product::<usize>();
        let data: Vec<f32> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut shape = vec![samples];
        shape.extend_from_slice(input_shape);
        Ok(Self {
            seed,
            tensor: Tensor::new(shape, data)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedMidParams {
    /// Probe batch size `M`.
    pub probe_samples: usize,
    /// Positions in the architecture's tap list to use; all when unset.
    pub taps: Option<Vec<usize>>,
}

impl Default for FedMidParams {
    fn default() -> Self {
        Self {
            probe_samples: 200,
            taps: None,
        }
    }
}

/// Distance matrices of every selected tap for the model `global + update`.
pub fn client_distance_matrices(
    arch: &std::sync::Arc<Architecture>,
    global: &ParamVector,
    update: &ParamVector,
    probe: &Tensor,
    taps: &[usize],
) -> Result<Vec<DistanceMatrix>> {
    let model = Model::from_params(arch.clone(), &global.add(update)?)?;
    let acts = model.forward_with_taps(probe, BnMode::CurrentBatchStats)?;
    taps.iter().map(|&t| build_distance_matrix(&acts.embeddings[t])).collect()
}

/// Score one round of updates against a probe batch.
pub fn score_updates(
    arch: &std::sync::Arc<Architecture>,
    global: &ParamVector,
    updates: &[ParamVector],
    client_ids: &[usize],
    probe: &Tensor,
    taps: Option<&[usize]>,
) -> Result<ScoreBoard> {
    let n = updates.len();
    if n < 2 {
        return Err(invalid(format!("fedmid needs at least 2 clients, got {n}")));
    }
    if client_ids.len() != n {
        return Err(invalid("client ids and updates differ in length"));
    }
    let all = arch.taps().len();
    let taps: Vec<usize> = match taps {
        Some(t) if t.is_empty() || t.iter().any(|&i| i >= all) => {
            return Err(invalid(format!("fedmid taps {t:?} invalid for {all} tap points")))
        }
        Some(t) => t.to_vec(),
        None => (0..all).collect(),
    };
    let matrices: Vec<Vec<DistanceMatrix>> = updates
        .par_iter()
        .map(|u| client_distance_matrices(arch, global, u, probe, &taps))
        .collect::<Result<_>>()?;
    let mut pairwise = Vec::with_capacity(taps.len());
    for l in 0..taps.len() {
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        let dists: Vec<f64> = pairs
            .par_iter()
            .map(|&(i, j)| layer_distance(&matrices[i][l], &matrices[j][l]))
            .collect::<Result<_>>()?;
        let mut table = vec![vec![0f64; n]; n];
        for (&(i, j), d) in pairs.iter().zip(dists) {
            table[i][j] = d;
            table[j][i] = d;
        }
        pairwise.push(table);
    }
    let layers = taps.iter().map(|&t| arch.taps()[t]).collect();
    ScoreBoard::from_pairwise(client_ids.to_vec(), layers, &pairwise)
}

/// The FedMID aggregator. Returns the count-normalized weights, which the
/// harness applies verbatim (they need not sum to one).
#[derive(Debug, Clone, Default)]
pub struct FedMid {
    params: FedMidParams,
}

impl FedMid {
    pub fn new(params: FedMidParams) -> Self {
        Self { params }
    }

    pub fn params(&self) -> &FedMidParams {
        &self.params
    }
}

impl AggregatorPlugin for FedMid {
    fn name(&self) -> &'static str {
        "fedmid"
    }

    fn aggregate(&mut self, ctx: &RoundContext) -> Result<AggregatorOutput> {
        let probe = ProbeBatch::generate(ctx.arch.input_shape(), self.params.probe_samples, ctx.seed)?;
        let board = score_updates(
            &ctx.arch,
            &ctx.global,
            &ctx.updates,
            &ctx.client_ids,
            &probe.tensor,
            self.params.taps.as_deref(),
        )?;
        let mut weights = board.aggregation.clone();
        if weights.iter().all(|w| *w <= 0.0) {
            log::warn!("fedmid round {}: every weight is zero, falling back to uniform", ctx.round);
            weights = vec![1.0 / ctx.len() as f64; ctx.len()];
        }
        Ok(AggregatorOutput::new(Aggregate::RawWeights(weights)).with("scoreboard", json!(board)))
    }
}
