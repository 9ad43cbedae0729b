//! The federated simulation core: partitioning, local training, weighted
//! aggregation and the round loop.

mod aggregate;
mod partition;
mod simulation;
mod training;

use std::sync::Arc;

pub use aggregate::{normalize_weights, size_weights, uniform_weights, weighted_aggregate};
pub use partition::{dirichlet_partition, dirichlet_partition_indices, PartitionSpec};
pub use simulation::{sample_clients, ClientState, RoundRecord, Simulation, SimulationSetup};
pub use training::{local_train, FedVariant, LocalTrainConfig};

use crate::model::{Architecture, ParamVector};

/// Everything an aggregator sees in one communication round.
#[derive(Debug, Clone)]
pub struct RoundContext {
    pub round: usize,
    /// Participating client ids, aligned with `updates` and `dataset_sizes`.
    pub client_ids: Vec<usize>,
    pub arch: Arc<Architecture>,
    pub global: ParamVector,
    pub updates: Vec<ParamVector>,
    pub dataset_sizes: Vec<usize>,
    /// Seed for any randomness the aggregator needs this round.
    pub seed: u64,
    /// Update the server computed on its root dataset (FLTrust only).
    pub server_update: Option<ParamVector>,
}

impl RoundContext {
    pub fn len(&self) -> usize {
        self.updates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.updates.is_empty()
    }
}
