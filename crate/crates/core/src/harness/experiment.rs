use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use serde_json::json;

use super::config::ExperimentConfig;
use super::desk::{load_csv_dataset, DeskDataset, DeskSpec};
use super::metrics::{final_metrics, Summary};
use crate::attack::{poison_targeted, poison_untargeted, Scenario};
use crate::data::Dataset;
use crate::defense::build_aggregator;
use crate::error::{Error, Result};
use crate::federation::{
    dirichlet_partition, sample_clients, ClientState, PartitionSpec, RoundRecord, Simulation, SimulationSetup,
};
use crate::rng::{derive_seed, stream_rng, Stream};

/// Worker count after applying the `FEDMID_THREADS` cap (0 means auto).
pub fn effective_threads(configured: usize) -> usize {
    let cap = std::env::var("FEDMID_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    match (configured, cap) {
        (c, 0) => c,
        (0, cap) => cap,
        (c, cap) => c.min(cap),
    }
}

/// Training and test data for a configuration.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let shape = cfg.input_shape();
    match (&cfg.train_csv, &cfg.test_csv) {
        (Some(tr), Some(te)) => Ok((
            load_csv_dataset(Path::new(tr), &shape, cfg.num_classes)?,
            load_csv_dataset(Path::new(te), &shape, cfg.num_classes)?,
        )),
        (None, None) => {
            let d = DeskDataset::generate(&DeskSpec {
                num_classes: cfg.num_classes,
                channels: cfg.image_channels,
                size: cfg.image_size,
                train: cfg.train_samples,
                test: cfg.test_samples,
                noise_sigma: cfg.noise_sigma,
                seed: cfg.seed,
            })?;
            Ok((d.train, d.test))
        }
        _ => Err(Error::InvalidConfig {
            key: if cfg.train_csv.is_some() { "test_csv" } else { "train_csv" }.into(),
            reason: "train_csv and test_csv must be given together".into(),
        }),
    }
}

/// Partition the data, pick the attackers and poison their datasets.
pub fn build_setup(cfg: &ExperimentConfig) -> Result<SimulationSetup> {
    cfg.validate()?;
    let (train, test) = load_data(cfg)?;
    let parts = dirichlet_partition(
        &train,
        &PartitionSpec {
            num_clients: cfg.num_clients,
            beta: cfg.beta,
            num_classes: cfg.num_classes,
            seed: derive_seed(cfg.seed, Stream::Partition, &[]),
        },
    )?;
    let attack = cfg.attack_config();
    let attackers = sample_clients(
        cfg.num_clients,
        cfg.num_attackers(),
        &mut stream_rng(cfg.seed, Stream::AttackerSelection, &[]),
    );
    let clients = parts
        .into_iter()
        .enumerate()
        .map(|(id, data)| {
            let malicious = attackers.contains(&id);
            let data = if !malicious {
                data
            } else {
                let mut rng = stream_rng(cfg.seed, Stream::Poison, &[id as u64]);
                match attack.scenario {
                    Scenario::None | Scenario::OmniscientUntargeted => data,
                    Scenario::LabelFlipUntargeted | Scenario::AdaptiveUntargeted => {
                        poison_untargeted(&data, attack.pollution_ratio, &mut rng)?
                    }
                    Scenario::LabelFlipTargeted | Scenario::OmniscientTargeted | Scenario::AdaptiveTargeted => {
                        poison_targeted(&data, attack.pollution_ratio, &attack.trigger, &mut rng)?
                    }
                }
            };
            Ok(ClientState { id, data, malicious })
        })
        .collect::<Result<Vec<_>>>()?;
    let root = {
        let k = cfg.root_samples.min(train.len());
        let mut idx = sample(&mut stream_rng(cfg.seed, Stream::RootData, &[]), train.len(), k).into_vec();
        idx.sort_unstable();
        (k > 0).then(|| train.subset(&idx))
    };
    Ok(SimulationSetup {
        seed: cfg.seed,
        arch: cfg.architecture()?,
        clients,
        test,
        root,
        participation: cfg.participation,
        train: cfg.train_config(),
        attack,
        threads: effective_threads(cfg.threads),
        record_timing: cfg.record_timing,
        measure_asr: cfg.measure_asr.unwrap_or(cfg.attack.is_targeted()),
    })
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub config_hash: String,
    pub attackers: Vec<usize>,
    pub records: Vec<RoundRecord>,
    pub summary: Summary,
}

impl RunOutcome {
    pub fn summary_json(&self, cfg: &ExperimentConfig) -> serde_json::Value {
        let n = self.records.len().max(1) as f64;
        json!({
            "acc_mean": self.summary.acc_mean,
            "acc_std": self.summary.acc_std,
            "asr_mean": self.summary.asr_mean,
            "asr_std": self.summary.asr_std,
            "window": self.summary.window,
            "config_hash": self.config_hash,
            "acc": self.summary.display_acc(),
            "asr": self.summary.display_asr(),
            "aggregator": cfg.aggregator,
            "attack": cfg.attack.code(),
            "seed": cfg.seed,
            "rounds": self.records.len(),
            "attackers": self.attackers,
            "mean_agg_time_ms": self.records.iter().map(|r| r.agg_time_ms).sum::<f64>() / n,
            "mean_round_time_ms": self.records.iter().map(|r| r.round_time_ms).sum::<f64>() / n,
            "total_time_ms": self.records.last().map(|r| r.cumulative_time_ms).unwrap_or(0.0),
        })
    }
}

/// Run a configuration in memory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let setup = build_setup(cfg)?;
    let attackers = setup.clients.iter().filter(|c| c.malicious).map(|c| c.id).collect();
    let aggregator = build_aggregator(&cfg.aggregator, &cfg.aggregator_params())?;
    let mut sim = Simulation::new(setup, aggregator)?;
    let mut records = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let r = sim.step()?;
        log::info!(
            "{} {} round {}: acc {:.4}{}",
            cfg.aggregator,
            cfg.attack,
            r.round,
            r.acc,
            r.asr.map(|a| format!(" asr {a:.4}")).unwrap_or_default()
        );
        records.push(r);
    }
    let summary = final_metrics(&records, cfg.window)?;
    Ok(RunOutcome {
        config_hash: cfg.hash()?,
        attackers,
        records,
        summary,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-round CSV with a fixed header and one weight column per client.
pub fn rounds_csv(records: &[RoundRecord], num_clients: usize) -> String {
    let mut s = String::from("round,acc,asr,agg_time_ms,attacker_mean_weight,benign_mean_weight");
    for i in 0..num_clients {
        let _ = write!(s, ",w_{i}");
    }
    s.push('\n');
    for r in records {
        let _ = write!(
            s,
            "{},{},{},{},{},{}",
            r.round,
            r.acc,
            cell(r.asr),
            r.agg_time_ms,
            cell(r.attacker_mean_weight),
            cell(r.benign_mean_weight)
        );
        for i in 0..num_clients {
            let _ = write!(s, ",{}", cell(r.weights.get(i).copied().flatten()));
        }
        s.push('\n');
    }
    s
}

/// Write `rounds.csv`, `summary.json`, `config.toml` and, when any
/// aggregator reported diagnostics, `diagnostics.jsonl`.
pub fn write_outputs(dir: &Path, cfg: &ExperimentConfig, outcome: &RunOutcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("rounds.csv"), rounds_csv(&outcome.records, cfg.num_clients))?;
    let summary = serde_json::to_string_pretty(&outcome.summary_json(cfg)).map_err(|e| Error::Serialization(e.to_string()))?;
    std::fs::write(dir.join("summary.json"), summary + "\n")?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    if outcome.records.iter().any(|r| !r.diagnostics.is_empty()) {
        let mut lines = String::new();
        for r in &outcome.records {
            let v = json!({ "round": r.round, "participants": r.participants, "diagnostics": r.diagnostics });
            lines.push_str(&v.to_string());
            lines.push('\n');
        }
        std::fs::write(dir.join("diagnostics.jsonl"), lines)?;
    }
    Ok(())
}

pub fn run_to_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<RunOutcome> {
    let outcome = run_experiment(cfg)?;
    write_outputs(dir, cfg, &outcome)?;
    Ok(outcome)
}

/// `k` replicas with seeds `seed, seed+1, ..` under `dir/seed_<s>`.
pub fn run_seeds(cfg: &ExperimentConfig, k: usize, dir: &Path) -> Result<Vec<(PathBuf, RunOutcome)>> {
    if k <= 1 {
        return Ok(vec![(dir.to_path_buf(), run_to_dir(cfg, dir)?)]);
    }
    (0..k as u64)
        .map(|i| {
            let c = ExperimentConfig {
                seed: cfg.seed + i,
                ..cfg.clone()
            };
            let d = dir.join(format!("seed_{}", c.seed));
            run_to_dir(&c, &d).map(|o| (d, o))
        })
        .collect()
}

/// One run per value of `axis`, each under `dir/<axis>=<value>`.
pub fn sweep(
    cfg: &ExperimentConfig,
    axis: &str,
    values: &[String],
    seeds: usize,
    dir: &Path,
) -> Result<Vec<(PathBuf, RunOutcome)>> {
    let configs = values
        .iter()
        .map(|v| cfg.with_override(axis, v).map(|c| (v, c)))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for (v, c) in configs {
        out.extend(run_seeds(&c, seeds, &dir.join(format!("{axis}={v}")))?);
    }
    Ok(out)
}
