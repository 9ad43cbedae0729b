use std::sync::Arc;
use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{local_train, normalize_weights, weighted_aggregate, LocalTrainConfig, RoundContext};
use crate::attack::{benign_statistics, lie_calibrate, lie_clamp, AdaptiveRegularizer, AttackConfig, Scenario};
use crate::data::Dataset;
use crate::defense::{Aggregate, AggregatorPlugin};
use crate::error::{invalid, Error, Result};
use crate::harness::{evaluate_acc, evaluate_asr};
use crate::model::{Architecture, Model, ParamVector};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::tensor::Tensor;

/// Floor for aggregated batch-norm running variances, which must stay
/// strictly positive.
const MIN_RUNNING_VAR: f32 = 1e-6;

/// One client of the federation. Malicious clients hold their (already
/// poisoned) training data and keep their role for the whole run.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub data: Dataset,
    pub malicious: bool,
}

/// `k` distinct client ids out of `n`, sorted ascending.
pub fn sample_clients<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let mut ids = sample(rng, n, k.min(n)).into_vec();
    ids.sort_unstable();
    ids
}

/// Metrics of one communication round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based round index.
    pub round: usize,
    pub acc: f64,
    pub asr: Option<f64>,
    pub participants: Vec<usize>,
    /// Effective aggregation weight per client id; `None` for clients that
    /// did not participate or when the aggregator combines updates directly.
    pub weights: Vec<Option<f64>>,
    pub attacker_mean_weight: Option<f64>,
    pub benign_mean_weight: Option<f64>,
    pub agg_time_ms: f64,
    pub round_time_ms: f64,
    pub cumulative_time_ms: f64,
    pub diagnostics: Map<String, Value>,
}

/// Everything the simulation needs besides the aggregator.
#[derive(Debug, Clone)]
pub struct SimulationSetup {
    pub seed: u64,
    pub arch: Arc<Architecture>,
    pub clients: Vec<ClientState>,
    pub test: Dataset,
    /// Server-held clean samples, used only by aggregators that ask for a
    /// server update.
    pub root: Option<Dataset>,
    pub participation: f64,
    pub train: LocalTrainConfig,
    pub attack: AttackConfig,
    /// Worker threads for local training; 0 picks the rayon default.
    pub threads: usize,
    /// Measure wall-clock times; when off every time field is 0 so repeated
    /// runs produce identical records.
    pub record_timing: bool,
    /// Evaluate the trigger's success rate every round.
    pub measure_asr: bool,
}

pub struct Simulation {
    setup: SimulationSetup,
    aggregator: Box<dyn AggregatorPlugin>,
    global: ParamVector,
    round: usize,
    cumulative_ms: f64,
    pool: rayon::ThreadPool,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl Simulation {
    pub fn new(setup: SimulationSetup, aggregator: Box<dyn AggregatorPlugin>) -> Result<Self> {
        if setup.clients.is_empty() {
            return Err(invalid("simulation needs at least one client"));
        }
        if !(setup.participation > 0.0 && setup.participation <= 1.0) {
            return Err(Error::InvalidConfig {
                key: "participation".into(),
                reason: format!("must lie in (0, 1], got {}", setup.participation),
            });
        }
        if setup.test.is_empty() {
            return Err(Error::EmptyDataset("test set".into()));
        }
        if aggregator.needs_server_update() && setup.root.as_ref().is_none_or(|r| r.is_empty()) {
            return Err(invalid(format!("{} needs a root dataset", aggregator.name())));
        }
        setup.attack.validate()?;
        let model = Model::init(setup.arch.clone(), &mut stream_rng(setup.seed, Stream::Init, &[]));
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(setup.threads)
            .build()
            .map_err(|e| invalid(format!("thread pool: {e}")))?;
        Ok(Self {
            global: model.flatten_params(),
            setup,
            aggregator,
            round: 0,
            cumulative_ms: 0.0,
            pool,
        })
    }

    pub fn global(&self) -> &ParamVector {
        &self.global
    }

    pub fn global_model(&self) -> Result<Model> {
        Model::from_params(self.setup.arch.clone(), &self.global)
    }

    pub fn setup(&self) -> &SimulationSetup {
        &self.setup
    }

    pub fn rounds_done(&self) -> usize {
        self.round
    }

    pub fn aggregator_name(&self) -> &'static str {
        self.aggregator.name()
    }

    fn participants_per_round(&self) -> usize {
        let n = self.setup.clients.len();
        ((self.setup.participation * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
    }

    fn adaptive_probe(&self, client: usize, round: usize) -> Result<Tensor> {
        let mut rng = stream_rng(self.setup.seed, Stream::Poison, &[client as u64, round as u64]);
        let m = self.setup.attack.adaptive_probe_size;
        let mut shape = vec![m];
        shape.extend_from_slice(self.setup.arch.input_shape());
        let len = shape.iter().product();
        Tensor::new(shape, (0..len).map(|_| StandardNormal.sample(&mut rng)).collect())
    }

    /// Local training for every participant. Attackers in scenario 2U skip
    /// training: their update is calibrated from benign statistics later.
    fn train_participants(&self, ids: &[usize], round: usize) -> Result<Vec<Option<ParamVector>>> {
        let s = &self.setup;
        let global_model = Model::from_params(s.arch.clone(), &self.global)?;
        ids.par_iter()
            .map(|&id| {
                let client = &s.clients[id];
                let scenario = s.attack.scenario;
                if client.malicious && scenario == Scenario::OmniscientUntargeted {
                    return Ok(None);
                }
                let reg = if client.malicious && scenario.is_adaptive() {
                    Some(AdaptiveRegularizer::new(
                        &global_model,
                        self.adaptive_probe(id, round)?,
                        s.attack.adaptive_taps.as_deref(),
                    )?)
                } else {
                    None
                };
                let mut rng = stream_rng(s.seed, Stream::LocalTrain, &[id as u64, round as u64]);
                local_train(&s.arch, &self.global, &client.data, &s.train, &mut rng, reg.as_ref()).map(Some)
            })
            .collect()
    }

    /// Replace omniscient attackers' updates using this round's benign
    /// statistics.
    fn apply_omniscient(&self, ids: &[usize], trained: Vec<Option<ParamVector>>) -> Result<Vec<ParamVector>> {
        let s = &self.setup;
        let benign: Vec<ParamVector> = ids
            .iter()
            .zip(&trained)
            .filter(|(&id, _)| !s.clients[id].malicious)
            .filter_map(|(_, u)| u.clone())
            .collect();
        let stats = if benign.is_empty() {
            log::warn!("no benign participant this round; omniscient attackers have no statistics");
            None
        } else {
            Some(benign_statistics(&benign)?)
        };
        let z = s.attack.signed_z();
        let calibrated = match &stats {
            Some((m, sd)) if s.attack.scenario == Scenario::OmniscientUntargeted => Some(lie_calibrate(m, sd, z)?),
            _ => None,
        };
        ids.iter()
            .zip(trained)
            .map(|(&id, u)| {
                if !s.clients[id].malicious || !s.attack.scenario.is_omniscient() {
                    return u.ok_or_else(|| invalid("missing update"));
                }
                match (s.attack.scenario, &stats) {
                    (Scenario::OmniscientUntargeted, _) => Ok(calibrated
                        .clone()
                        .unwrap_or_else(|| ParamVector::zeros(s.arch.layout().clone()))),
                    (_, Some((m, sd))) => lie_clamp(&u.ok_or_else(|| invalid("missing update"))?, m, sd, s.attack.lie_z),
                    (_, None) => u.ok_or_else(|| invalid("missing update")),
                }
            })
            .collect()
    }

    fn server_update(&self, round: usize) -> Result<Option<ParamVector>> {
        if !self.aggregator.needs_server_update() {
            return Ok(None);
        }
        let root = self.setup.root.as_ref().ok_or_else(|| invalid("missing root dataset"))?;
        let mut rng = stream_rng(self.setup.seed, Stream::RootData, &[round as u64]);
        local_train(&self.setup.arch, &self.global, root, &self.setup.train, &mut rng, None).map(Some)
    }

    /// Run one communication round.
    pub fn step(&mut self) -> Result<RoundRecord> {
        let round = self.round + 1;
        let start = Instant::now();
        let s = &self.setup;
        let n = s.clients.len();
        let mut rng = stream_rng(s.seed, Stream::Sampling, &[round as u64]);
        let ids = sample_clients(n, self.participants_per_round(), &mut rng);

        let (updates, server_update) = self.pool.install(|| -> Result<_> {
            let trained = self.train_participants(&ids, round)?;
            let updates = self.apply_omniscient(&ids, trained)?;
            Ok((updates, self.server_update(round)?))
        })?;

        let ctx = RoundContext {
            round,
            client_ids: ids.clone(),
            arch: s.arch.clone(),
            global: self.global.clone(),
            dataset_sizes: ids.iter().map(|&i| s.clients[i].data.len()).collect(),
            updates,
            seed: derive_seed(s.seed, Stream::Aggregator, &[round as u64]),
            server_update,
        };
        let agg_start = Instant::now();
        let out = self.pool.install(|| self.aggregator.aggregate(&ctx))?;
        let (next, applied) = match &out.aggregate {
            Aggregate::Update(u) => (self.global.add(u)?, None),
            Aggregate::Weights(w) => {
                let w = normalize_weights(w);
                (weighted_aggregate(&ctx.global, &ctx.updates, &w)?, Some(w))
            }
            Aggregate::RawWeights(w) => (weighted_aggregate(&ctx.global, &ctx.updates, w)?, Some(w.clone())),
        };
        let agg_ms = agg_start.elapsed().as_secs_f64() * 1e3;
        let applied = applied.or_else(|| {
            out.diagnostics
                .get("weights")
                .and_then(|v| serde_json::from_value::<Vec<f64>>(v.clone()).ok())
        });

        let s = &self.setup;
        let mut model = Model::from_params(s.arch.clone(), &next)?;
        model.clamp_running_var(MIN_RUNNING_VAR);
        if !model.flatten_params().all_finite() {
            return Err(Error::NonFinite(format!("global model after round {round}")));
        }
        self.global = model.flatten_params();
        self.round = round;

        let acc = evaluate_acc(&model, &s.test)?;
        let asr = if s.measure_asr {
            Some(evaluate_asr(&model, &s.test, &s.attack.trigger)?)
        } else {
            None
        };

        let mut weights = vec![None; n];
        if let Some(w) = &applied {
            for (&id, &v) in ids.iter().zip(w) {
                weights[id] = Some(v);
            }
        }
        let pick = |malicious: bool| {
            applied.as_ref().and_then(|w| {
                mean(
                    ids.iter()
                        .zip(w)
                        .filter(|(&id, _)| s.clients[id].malicious == malicious)
                        .map(|(_, v)| *v),
                )
            })
        };
        let (attacker_mean_weight, benign_mean_weight) = (pick(true), pick(false));
        let (agg_time_ms, round_time_ms) = if s.record_timing {
            (agg_ms, start.elapsed().as_secs_f64() * 1e3)
        } else {
            (0.0, 0.0)
        };
        self.cumulative_ms += round_time_ms;
        Ok(RoundRecord {
            round,
            acc,
            asr,
            participants: ids,
            weights,
            attacker_mean_weight,
            benign_mean_weight,
            agg_time_ms,
            round_time_ms,
            cumulative_time_ms: self.cumulative_ms,
            diagnostics: out.diagnostics,
        })
    }

    pub fn run(&mut self, rounds: usize) -> Result<Vec<RoundRecord>> {
        (0..rounds).map(|_| self.step()).collect()
    }
}
