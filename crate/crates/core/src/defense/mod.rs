//! Baseline robust aggregators and the shared aggregator contract.

mod bucket;
mod dnc;
mod fedcpa;
mod fltrust;
mod foolsgold;
mod krum;
mod linalg;
mod median;
mod residual;
mod rfa;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

pub use bucket::bucketing;
pub use dnc::{dnc, DncParams};
pub use fedcpa::{fedcpa_weights, jaccard, spearman};
pub use fltrust::fltrust;
pub use foolsgold::{foolsgold_weights, FoolsGold};
pub use krum::{krum_scores, multi_krum};
pub use linalg::top_eigenvector;
pub use median::{coordinate_median, trimmed_mean};
pub use residual::residual_base;
pub use rfa::{geometric_median, GeometricMedian};

use crate::error::{Error, Result};
use crate::federation::{size_weights, uniform_weights, RoundContext};
use crate::fedmid::{FedMid, FedMidParams};
use crate::model::ParamVector;
use crate::rng::SimRng;

/// Names accepted by [`build_aggregator`].
pub const AGGREGATORS: [&str; 12] = [
    "fedavg",
    "median",
    "trimmed_mean",
    "multi_krum",
    "foolsgold",
    "residual_base",
    "rfa",
    "dnc",
    "bucket",
    "fltrust",
    "fedcpa",
    "fedmid",
];

/// What an aggregator produced.
#[derive(Debug, Clone, PartialEq)]
pub enum Aggregate {
    /// A combined update `Δ`; the new global model is `φ + Δ`.
    Update(ParamVector),
    /// Non-negative per-client weights, normalized to sum to one before use.
    Weights(Vec<f64>),
    /// Per-client weights applied exactly as given.
    RawWeights(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct AggregatorOutput {
    pub aggregate: Aggregate,
    pub diagnostics: Map<String, Value>,
}

impl AggregatorOutput {
    pub fn new(aggregate: Aggregate) -> Self {
        Self {
            aggregate,
            diagnostics: Map::new(),
        }
    }

    pub fn with(mut self, key: &str, value: Value) -> Self {
        self.diagnostics.insert(key.to_string(), value);
        self
    }
}

/// Server-side aggregation rule.
pub trait AggregatorPlugin: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether the harness must train a server update on its root dataset
    /// before calling [`AggregatorPlugin::aggregate`].
    fn needs_server_update(&self) -> bool {
        false
    }

    fn aggregate(&mut self, ctx: &RoundContext) -> Result<AggregatorOutput>;
}

/// Hyperparameters for every registered aggregator. `None` fields derive
/// from the attacker-ratio estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregatorParams {
    /// Attacker fraction the server assumes.
    pub attacker_ratio: f64,
    /// Total client population `N`.
    pub num_clients: usize,
    /// FedAvg: uniform `1/|Cᵗ|` weights instead of dataset-size weights.
    pub uniform_weights: bool,
    pub trim_k: Option<usize>,
    pub krum_f: Option<usize>,
    pub krum_m: Option<usize>,
    pub residual_confidence: f64,
    pub residual_clip: f64,
    pub rfa_smoothing: f64,
    pub rfa_max_iter: usize,
    pub rfa_tolerance: f64,
    pub dnc_iters: usize,
    pub dnc_filter: f64,
    pub dnc_sub_dim: usize,
    pub dnc_n_mal: Option<usize>,
    pub bucket_size: usize,
    pub fedcpa_k_frac: f64,
    pub fedmid: FedMidParams,
}

impl Default for AggregatorParams {
    fn default() -> Self {
        Self {
            attacker_ratio: 0.2,
            num_clients: 20,
            uniform_weights: false,
            trim_k: None,
            krum_f: None,
            krum_m: None,
            residual_confidence: 2.0,
            residual_clip: 0.05,
            rfa_smoothing: 1e-6,
            rfa_max_iter: 100,
            rfa_tolerance: 1e-6,
            dnc_iters: 1,
            dnc_filter: 1.0,
            dnc_sub_dim: 10_000,
            dnc_n_mal: None,
            bucket_size: 2,
            fedcpa_k_frac: 0.01,
            fedmid: FedMidParams::default(),
        }
    }
}

impl AggregatorParams {
    /// `⌈ratio · n⌉` expected attackers among `n` participants.
    fn expected_attackers(&self, n: usize) -> usize {
        (self.attacker_ratio * n as f64 - 1e-9).ceil().max(0.0) as usize
    }

    fn rfa(&self) -> GeometricMedian {
        GeometricMedian {
            smoothing: self.rfa_smoothing,
            max_iter: self.rfa_max_iter,
            tolerance: self.rfa_tolerance,
        }
    }
}

pub fn build_aggregator(name: &str, params: &AggregatorParams) -> Result<Box<dyn AggregatorPlugin>> {
    let p = params.clone();
    Ok(match name {
        "fedavg" => Box::new(FedAvg { uniform: p.uniform_weights }),
        "median" => Box::new(Median),
        "trimmed_mean" => Box::new(TrimmedMean(p)),
        "multi_krum" => Box::new(MultiKrum(p)),
        "foolsgold" => Box::new(FoolsGold::default()),
        "residual_base" => Box::new(ResidualBase(p)),
        "rfa" => Box::new(Rfa(p)),
        "dnc" => Box::new(Dnc(p)),
        "bucket" => Box::new(Bucket(p)),
        "fltrust" => Box::new(FlTrust),
        "fedcpa" => Box::new(FedCpa(p)),
        "fedmid" => Box::new(FedMid::new(p.fedmid)),
        other => {
            return Err(Error::UnknownAggregator {
                name: other.to_string(),
                registered: AGGREGATORS.join(", "),
            })
        }
    })
}

struct FedAvg {
    uniform: bool,
}

impl AggregatorPlugin for FedAvg {
    fn name(&self) -> &'static str {
        "fedavg"
    }

    fn aggregate(&mut self, ctx: &RoundContext) -> Result<AggregatorOutput> {
        let w = if self.uniform {
            uniform_weights(ctx.len())
        } else {
            size_weights(&ctx.dataset_sizes)
        };
        Ok(AggregatorOutput::new(Aggregate::Weights(w)))
    }
}

struct Median;

impl AggregatorPlugin for Median {
    fn name(&self) -> &'static str {
        "median"
    }

    fn aggregate(&mut self, ctx: &RoundContext) -> Result<AggregatorOutput> {
        Ok(AggregatorOutput::new(Aggregate::Update(coordinate_median(&ctx.updates)?)))
    }
}

struct TrimmedMean(AggregatorParams);

impl AggregatorPlugin for TrimmedMean {
    fn name(&self) -> &'static str {
        "trimmed_mean"
    }

    fn aggregate(&mut self, ctx: &RoundContext) -> Result<AggregatorOutput> {
        let n = ctx.len();
        // Clip the default so at least one value survives per coordinate.
        let k = self
            .0
            .trim_k
            .unwrap_or_else(|| self.0.expected_attackers(n).min(n.saturating_sub(1) / 2));
        Ok(AggregatorOutput::new(Aggregate::Update(trimmed_mean(&ctx.updates, k)?)).with("trim_k", json!(k)))
    }
}

struct MultiKrum(AggregatorParams);

impl AggregatorPlugin for MultiKrum {
    fn name(&self) -> &'static str {
        "multi_krum"
    }

    fn aggregate(&mut self, ctx: &RoundContext) -> Result<AggregatorOutput> {
        let n = ctx.len();
        let f = self.0.krum_f.unwrap_or_else(|| self.0.expected_attackers(n));
        let m = self.0.krum_m.unwrap_or(n.saturating_sub(f)).clamp(1, n.max(1));
        let order = id_order(ctx);
        let (update, selected) = multi_krum(&reorder(&ctx.updates, &order), f, m)?;
        let selected: Vec<usize> = selected.into_iter().map(|k| order[k]).collect();
        let mut weights = vec![0.0; n];
        for &i in &selected {
            weights[i] = 1.0 / selected.len() as f64;
        }
        Ok(AggregatorOutput::new(Aggregate::Update(update))
            .with("selected", json!(selected))
            .with("weights", json!(weights)))
    }
}

impl AggregatorPlugin for FoolsGold {
    fn name(&self) -> &'static str {
        "foolsgold"
    }

    fn aggregate(&mut self, ctx: &RoundContext) -> Result<AggregatorOutput> {
        let w = self.update_and_weigh(&ctx.client_ids, &ctx.updates)?;
        Ok(AggregatorOutput::new(Aggregate::Weights(w)))
    }
}

struct ResidualBase(AggregatorParams);

impl AggregatorPlugin for ResidualBase {
    fn name(&self) -> &'static str {
        "residual_base"
    }

    fn aggregate(&mut self, ctx: &RoundContext) -> Result<AggregatorOutput> {
        let u = residual_base(&ctx.updates, self.0.residual_confidence, self.0.residual_clip)?;
        Ok(AggregatorOutput::new(Aggregate::Update(u)))
    }
}

struct Rfa(AggregatorParams);

impl AggregatorPlugin for Rfa {
    fn name(&self) -> &'static str {
        "rfa"
    }

    fn aggregate(&mut self, ctx: &RoundContext) -> Result<AggregatorOutput> {
        let (u, trace) = geometric_median(&ctx.updates, &self.0.rfa())?;
        Ok(AggregatorOutput::new(Aggregate::Update(u)).with("iterations", json!(trace.len())))
    }
}

struct Dnc(AggregatorParams);

impl AggregatorPlugin for Dnc {
    fn name(&self) -> &'static str {
        "dnc"
    }

    fn aggregate(&mut self, ctx: &RoundContext) -> Result<AggregatorOutput> {
        let n = ctx.len();
        let n_mal = self
            .0
            .dnc_n_mal
            .unwrap_or_else(|| (self.0.num_clients as f64 * self.0.attacker_ratio).round() as usize);
        // Leave at least one survivor.
        let max_mal = ((n.saturating_sub(1)) as f64 / self.0.dnc_filter.max(1e-12)).floor() as usize;
        let params = DncParams {
            iters: self.0.dnc_iters,
            filter: self.0.dnc_filter,
            sub_dim: self.0.dnc_sub_dim,
            n_mal: n_mal.min(max_mal),
        };
        let mut rng = <SimRng as rand::SeedableRng>::seed_from_u64(ctx.seed);
        let order = id_order(ctx);
        let (u, kept) = dnc(&reorder(&ctx.updates, &order), &params, &mut rng)?;
        let mut kept: Vec<usize> = kept.into_iter().map(|k| order[k]).collect();
        kept.sort_unstable();
        let mut weights = vec![0.0; n];
        for &i in &kept {
            weights[i] = 1.0 / kept.len() as f64;
        }
        Ok(AggregatorOutput::new(Aggregate::Update(u))
            .with("kept", json!(kept))
            .with("weights", json!(weights)))
    }
}

struct Bucket(AggregatorParams);

impl AggregatorPlugin for Bucket {
    fn name(&self) -> &'static str {
        "bucket"
    }

    fn aggregate(&mut self, ctx: &RoundContext) -> Result<AggregatorOutput> {
        let mut rng = <SimRng as rand::SeedableRng>::seed_from_u64(ctx.seed);
        let rfa = self.0.rfa();
        let updates = reorder(&ctx.updates, &id_order(ctx));
        let u = bucketing(&updates, self.0.bucket_size, &mut rng, |means| {
            geometric_median(means, &rfa).map(|(v, _)| v)
        })?;
        Ok(AggregatorOutput::new(Aggregate::Update(u)))
    }
}

struct FlTrust;

impl AggregatorPlugin for FlTrust {
    fn name(&self) -> &'static str {
        "fltrust"
    }

    fn needs_server_update(&self) -> bool {
        true
    }

    fn aggregate(&mut self, ctx: &RoundContext) -> Result<AggregatorOutput> {
        let server = ctx
            .server_update
            .as_ref()
            .ok_or_else(|| crate::error::invalid("fltrust needs a server update"))?;
        let (u, scores) = fltrust(&ctx.updates, server)?;
        Ok(AggregatorOutput::new(Aggregate::Update(u)).with("trust_scores", json!(scores)))
    }
}

struct FedCpa(AggregatorParams);

impl AggregatorPlugin for FedCpa {
    fn name(&self) -> &'static str {
        "fedcpa"
    }

    fn aggregate(&mut self, ctx: &RoundContext) -> Result<AggregatorOutput> {
        let w = fedcpa_weights(&ctx.global, &ctx.updates, self.0.fedcpa_k_frac)?;
        Ok(AggregatorOutput::new(Aggregate::Weights(w)))
    }
}

/// Positions of the round's updates sorted by client id, so randomized and
/// tie-breaking aggregators do not depend on the order updates arrive in.
fn id_order(ctx: &RoundContext) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ctx.len()).collect();
    order.sort_by_key(|&i| (ctx.client_ids.get(i).copied().unwrap_or(i), i));
    order
}

fn reorder(updates: &[ParamVector], order: &[usize]) -> Vec<ParamVector> {
    order.iter().map(|&i| updates[i].clone()).collect()
}

/// Shared input check: at least `min` updates, all with one layout.
pub(crate) fn check_updates(updates: &[ParamVector], min: usize, who: &str) -> Result<()> {
    if updates.len() < min {
        return Err(crate::error::invalid(format!(
            "{who} needs at least {min} updates, got {}",
            updates.len()
        )));
    }
    for u in &updates[1..] {
        updates[0].check_layout(u)?;
    }
    Ok(())
}
