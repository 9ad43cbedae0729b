use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{AttackConfig, Scenario, TriggerPatch};
use crate::defense::{AggregatorParams, AGGREGATORS};
use crate::error::{Error, Result};
use crate::federation::{FedVariant, LocalTrainConfig};
use crate::fedmid::FedMidParams;
use crate::model::{Architecture, Hyperparams};

/// Network family used by the clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    TinyBlockNet,
    Mlp,
    MlpBn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FedMode {
    Fedavg,
    Fedprox,
}

/// Flat experiment configuration. Every key is optional in the TOML file;
/// missing keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub num_clients: usize,
    pub rounds: usize,
    pub participation: f64,
    pub beta: f64,
    pub attacker_ratio: f64,

    pub attack: Scenario,
    /// Defaults to 0.5 for targeted and 0.8 for untargeted scenarios.
    pub pollution_ratio: Option<f64>,
    pub lie_z: f64,
    pub lie_negative: bool,
    /// Square trigger side; defaults to 4 for inputs up to 16 pixels, else 5.
    pub trigger_size: Option<usize>,
    pub trigger_target: usize,
    pub adaptive_taps: Option<Vec<usize>>,
    pub adaptive_probe_size: usize,
    /// Report ASR even without a targeted attack (defaults to targeted runs
    /// only).
    pub measure_asr: Option<bool>,

    pub aggregator: String,
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
    pub probe_samples: usize,
    pub fedmid_taps: Option<Vec<usize>>,
    pub root_samples: usize,

    pub model: ModelVariant,
    pub conv_channels: usize,
    pub hidden: Vec<usize>,
    pub local_epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub fed_variant: FedMode,
    pub prox_mu: f64,

    pub num_classes: usize,
    pub image_size: usize,
    pub image_channels: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub noise_sigma: f64,
    /// Load `label,pixel..` rows instead of generating the desk dataset.
    pub train_csv: Option<String>,
    pub test_csv: Option<String>,

    pub window: usize,
    pub threads: usize,
    pub record_timing: bool,

    pub diagnose_clients: usize,
    pub diagnose_epochs: usize,
    pub diagnose_samples: usize,
    pub diagnose_shuffle: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            num_clients: 20,
            rounds: 100,
            participation: 0.5,
            beta: 0.5,
            attacker_ratio: 0.2,
            attack: Scenario::None,
            pollution_ratio: None,
            lie_z: 1.5,
            lie_negative: false,
            trigger_size: None,
            trigger_target: 0,
            adaptive_taps: None,
            adaptive_probe_size: 200,
            measure_asr: None,
            aggregator: "fedavg".into(),
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
            probe_samples: 200,
            fedmid_taps: None,
            root_samples: 100,
            model: ModelVariant::TinyBlockNet,
            conv_channels: 8,
            hidden: vec![64, 32],
            local_epochs: 1,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-5,
            batch_size: 64,
            fed_variant: FedMode::Fedavg,
            prox_mu: 0.01,
            num_classes: 4,
            image_size: 16,
            image_channels: 1,
            train_samples: 2000,
            test_samples: 400,
            noise_sigma: 0.1,
            train_csv: None,
            test_csv: None,
            window: 10,
            threads: 0,
            record_timing: true,
            diagnose_clients: 5,
            diagnose_epochs: 10,
            diagnose_samples: 400,
            diagnose_shuffle: true,
        }
    }
}

fn bad(key: &str, reason: impl Into<String>) -> Error {
    Error::InvalidConfig {
        key: key.into(),
        reason: reason.into(),
    }
}

/// Name of the key on the line where a TOML error starts.
fn key_at(src: &str, err: &toml::de::Error) -> Option<String> {
    let msg = err.message();
    if let Some(rest) = msg.strip_prefix("unknown field `") {
        return rest.split('`').next().map(str::to_string);
    }
    let start = err.span()?.start;
    let line_start = src[..start].rfind('\n').map(|i| i + 1).unwrap_or(0);
    let line = src[line_start..].lines().next()?;
    let key = line.split('=').next()?.trim();
    (!key.is_empty() && line.contains('=')).then(|| key.to_string())
}

impl ExperimentConfig {
    /// Desk-scale preset: 10 clients, 20 rounds, and smaller batches with a
    /// larger step so ~200-sample clients take enough SGD steps per round.
    pub fn desk() -> Self {
        Self {
            num_clients: 10,
            rounds: 20,
            batch_size: 16,
            lr: 0.05,
            ..Self::default()
        }
    }

    pub fn from_toml(src: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(src).map_err(|e| Error::InvalidConfig {
            key: key_at(src, &e).unwrap_or_else(|| "<config>".into()),
            reason: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML echo.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_clients < 2 {
            return Err(bad("num_clients", "need at least 2 clients"));
        }
        if self.rounds == 0 {
            return Err(bad("rounds", "must be >= 1"));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(bad("participation", "must lie in (0, 1]"));
        }
        if !(self.beta > 0.0) {
            return Err(bad("beta", "must be > 0"));
        }
        if !(0.0..0.5).contains(&self.attacker_ratio) {
            return Err(bad("attacker_ratio", "must lie in [0, 0.5)"));
        }
        if let Some(p) = self.pollution_ratio {
            if !(p > 0.0 && p <= 1.0) {
                return Err(bad("pollution_ratio", "must lie in (0, 1]"));
            }
        }
        if !(self.lie_z >= 0.0) {
            return Err(bad("lie_z", "must be >= 0"));
        }
        if !AGGREGATORS.contains(&self.aggregator.as_str()) {
            return Err(bad(
                "aggregator",
                format!("unknown aggregator `{}`; registered: {}", self.aggregator, AGGREGATORS.join(", ")),
            ));
        }
        if self.num_classes < 2 {
            return Err(bad("num_classes", "need at least 2 classes"));
        }
        if self.trigger_target >= self.num_classes {
            return Err(bad("trigger_target", "must be a valid class"));
        }
        let side = self.trigger_side();
        if side == 0 || side > self.image_size {
            return Err(bad("trigger_size", "trigger must fit inside the image"));
        }
        if self.probe_samples < 2 {
            return Err(bad("probe_samples", "need at least 2 probe samples"));
        }
        if self.adaptive_probe_size < 2 {
            return Err(bad("adaptive_probe_size", "need at least 2 probe samples"));
        }
        if self.local_epochs == 0 {
            return Err(bad("local_epochs", "must be >= 1"));
        }
        if !(self.lr >= 0.0) {
            return Err(bad("lr", "must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be >= 1"));
        }
        if !(self.prox_mu >= 0.0) {
            return Err(bad("prox_mu", "must be >= 0"));
        }
        if self.model == ModelVariant::TinyBlockNet && self.image_size % 4 != 0 {
            return Err(bad("image_size", "tiny_block_net needs a multiple of 4"));
        }
        if self.hidden.len() != 2 && self.model != ModelVariant::TinyBlockNet {
            return Err(bad("hidden", "mlp needs exactly two hidden widths"));
        }
        if self.train_samples < self.num_clients {
            return Err(bad("train_samples", "need at least one sample per client"));
        }
        if self.test_samples == 0 {
            return Err(bad("test_samples", "must be >= 1"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(bad("noise_sigma", "must be >= 0"));
        }
        if self.window == 0 || self.window > self.rounds {
            return Err(bad("window", "must lie in [1, rounds]"));
        }
        if self.bucket_size == 0 {
            return Err(bad("bucket_size", "must be >= 1"));
        }
        if !(self.fedcpa_k_frac > 0.0 && self.fedcpa_k_frac <= 0.5) {
            return Err(bad("fedcpa_k_frac", "must lie in (0, 0.5]"));
        }
        if self.diagnose_clients < 2 {
            return Err(bad("diagnose_clients", "need at least 2 clients"));
        }
        Ok(())
    }

    pub fn trigger_side(&self) -> usize {
        self.trigger_size
            .unwrap_or(if self.image_size <= 16 { 4 } else { 5 })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.image_channels, self.image_size, self.image_size]
    }

    pub fn architecture(&self) -> Result<std::sync::Arc<Architecture>> {
        let shape = self.input_shape();
        let h = [self.hidden.first().copied().unwrap_or(64), self.hidden.get(1).copied().unwrap_or(32)];
        match self.model {
            ModelVariant::TinyBlockNet => Architecture::tiny_block_net(shape, self.conv_channels, self.num_classes),
            ModelVariant::Mlp => Architecture::mlp(&shape, h, self.num_classes, false),
            ModelVariant::MlpBn => Architecture::mlp(&shape, h, self.num_classes, true),
        }
    }

    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            scenario: self.attack,
            pollution_ratio: self.pollution_ratio.unwrap_or(self.attack.default_pollution()),
            lie_z: self.lie_z,
            lie_negative: self.lie_negative,
            trigger: TriggerPatch::checkerboard(self.trigger_side(), 1.0, self.trigger_target),
            adaptive_taps: self.adaptive_taps.clone(),
            adaptive_probe_size: self.adaptive_probe_size,
        }
    }

    pub fn train_config(&self) -> LocalTrainConfig {
        LocalTrainConfig {
            epochs: self.local_epochs,
            hp: Hyperparams {
                lr: self.lr as f32,
                momentum: self.momentum as f32,
                weight_decay: self.weight_decay as f32,
                batch_size: self.batch_size,
            },
            variant: match self.fed_variant {
                FedMode::Fedavg => FedVariant::FedAvg,
                FedMode::Fedprox => FedVariant::FedProx { mu: self.prox_mu },
            },
        }
    }

    pub fn aggregator_params(&self) -> AggregatorParams {
        AggregatorParams {
            attacker_ratio: self.attacker_ratio,
            num_clients: self.num_clients,
            uniform_weights: self.uniform_weights,
            trim_k: self.trim_k,
            krum_f: self.krum_f,
            krum_m: self.krum_m,
            residual_confidence: self.residual_confidence,
            residual_clip: self.residual_clip,
            rfa_smoothing: self.rfa_smoothing,
            rfa_max_iter: self.rfa_max_iter,
            rfa_tolerance: self.rfa_tolerance,
            dnc_iters: self.dnc_iters,
            dnc_filter: self.dnc_filter,
            dnc_sub_dim: self.dnc_sub_dim,
            dnc_n_mal: self.dnc_n_mal,
            bucket_size: self.bucket_size,
            fedcpa_k_frac: self.fedcpa_k_frac,
            fedmid: FedMidParams {
                probe_samples: self.probe_samples,
                taps: self.fedmid_taps.clone(),
            },
        }
    }

    /// Number of malicious clients, `round(ratio · N)`.
    pub fn num_attackers(&self) -> usize {
        if self.attack == Scenario::None {
            0
        } else {
            (self.attacker_ratio * self.num_clients as f64).round() as usize
        }
    }

    /// Copy with one key overridden by a TOML literal (used by sweeps).
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(&self.to_toml()?).map_err(|e| Error::Serialization(e.to_string()))?;
        let parsed: toml::Value = match format!("v = {value}").parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").expect("present"),
            Err(_) => toml::Value::String(value.to_string()),
        };
        table.insert(key.to_string(), parsed);
        let src = toml::to_string(&table).map_err(|e| Error::Serialization(e.to_string()))?;
        Self::from_toml(&src).map_err(|e| match e {
            Error::InvalidConfig { reason, .. } => bad(key, reason),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::desk();
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(c, back);
        assert_eq!(c.hash().unwrap(), back.hash().unwrap());
    }

    #[test]
    fn errors_name_the_key() {
        match ExperimentConfig::from_toml("rounds = 5\nwindow = 3\nbogus_key = 1\n") {
            Err(Error::InvalidConfig { key, .. }) => assert_eq!(key, "bogus_key"),
            other => panic!("{other:?}"),
        }
        match ExperimentConfig::from_toml("rounds = 5\nwindow = 3\nbeta = \"x\"\n") {
            Err(Error::InvalidConfig { key, .. }) => assert_eq!(key, "beta"),
            other => panic!("{other:?}"),
        }
        match ExperimentConfig::from_toml("rounds = 5\nwindow = 3\naggregator = \"nope\"\n") {
            Err(Error::InvalidConfig { key, reason }) => {
                assert_eq!(key, "aggregator");
                assert!(reason.contains("fedmid"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn override_parses_literals() {
        let c = ExperimentConfig::desk();
        assert_eq!(c.with_override("beta", "0.25").unwrap().beta, 0.25);
        assert_eq!(c.with_override("aggregator", "median").unwrap().aggregator, "median");
        assert!(c.with_override("beta", "-1").is_err());
    }
}
