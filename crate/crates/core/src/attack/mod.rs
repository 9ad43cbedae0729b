//! Threat scenarios: label flipping (untargeted and backdoor), the
//! omniscient mean-plus-scaled-deviation attack, and the adaptive attack that
//! regularizes intermediate outputs toward the global model.

mod adaptive;
mod lie;
mod poison;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use adaptive::{adaptive_regularizer, AdaptiveRegularizer};
pub use lie::{benign_statistics, lie_calibrate, lie_clamp};
pub use poison::{poison_targeted, poison_untargeted, TriggerPatch};

use crate::error::{Error, Result};

/// Attack scenario: 1 = label flipping, 2 = omniscient calibration,
/// 3 = adaptive. `U` untargeted, `T` targeted (backdoor).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "1U")]
    LabelFlipUntargeted,
    #[serde(rename = "1T")]
    LabelFlipTargeted,
    #[serde(rename = "2U")]
    OmniscientUntargeted,
    #[serde(rename = "2T")]
    OmniscientTargeted,
    #[serde(rename = "3U")]
    AdaptiveUntargeted,
    #[serde(rename = "3T")]
    AdaptiveTargeted,
}

impl Scenario {
    pub const ALL: [Scenario; 7] = [
        Scenario::None,
        Scenario::LabelFlipUntargeted,
        Scenario::LabelFlipTargeted,
        Scenario::OmniscientUntargeted,
        Scenario::OmniscientTargeted,
        Scenario::AdaptiveUntargeted,
        Scenario::AdaptiveTargeted,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Scenario::None => "none",
            Scenario::LabelFlipUntargeted => "1U",
            Scenario::LabelFlipTargeted => "1T",
            Scenario::OmniscientUntargeted => "2U",
            Scenario::OmniscientTargeted => "2T",
            Scenario::AdaptiveUntargeted => "3U",
            Scenario::AdaptiveTargeted => "3T",
        }
    }

    pub fn is_attack(self) -> bool {
        self != Scenario::None
    }

    pub fn is_targeted(self) -> bool {
        matches!(
            self,
            Scenario::LabelFlipTargeted | Scenario::OmniscientTargeted | Scenario::AdaptiveTargeted
        )
    }

    pub fn is_omniscient(self) -> bool {
        matches!(
            self,
            Scenario::OmniscientUntargeted | Scenario::OmniscientTargeted
        )
    }

    pub fn is_adaptive(self) -> bool {
        matches!(self, Scenario::AdaptiveUntargeted | Scenario::AdaptiveTargeted)
    }

    /// Default pollution ratio: 0.5 for targeted, 0.8 for untargeted.
    pub fn default_pollution(self) -> f64 {
        if self.is_targeted() {
            0.5
        } else {
            0.8
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.code().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig {
                key: "attack".into(),
                reason: format!("unknown scenario `{s}` (expected none, 1U, 1T, 2U, 2T, 3U or 3T)"),
            })
    }
}

/// Per-attacker configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub scenario: Scenario,
    /// Fraction of the attacker's samples that are poisoned, in `(0, 1]`.
    pub pollution_ratio: f64,
    /// Perturbation scale for the omniscient attack, `z >= 0`.
    pub lie_z: f64,
    /// Flip the sign of the omniscient perturbation (`mean − z·std`).
    pub lie_negative: bool,
    pub trigger: TriggerPatch,
    /// Indices into the architecture's tap list regularized by the adaptive
    /// attacker; `None` means every tap.
    pub adaptive_taps: Option<Vec<usize>>,
    /// Probe batch size used by the adaptive attacker.
    pub adaptive_probe_size: usize,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pollution_ratio > 0.0 && self.pollution_ratio <= 1.0) {
            return Err(Error::InvalidConfig {
                key: "pollution_ratio".into(),
                reason: format!("must lie in (0, 1], got {}", self.pollution_ratio),
            });
        }
        if !(self.lie_z >= 0.0) {
            return Err(Error::InvalidConfig {
                key: "lie_z".into(),
                reason: format!("must be >= 0, got {}", self.lie_z),
            });
        }
        if self.adaptive_probe_size < 2 {
            return Err(Error::InvalidConfig {
                key: "adaptive_probe_size".into(),
                reason: "needs at least 2 probe samples".into(),
            });
        }
        Ok(())
    }

    /// Signed perturbation scale.
    pub fn signed_z(&self) -> f64 {
        if self.lie_negative {
            -self.lie_z
        } else {
            self.lie_z
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_codes_round_trip() {
        for s in Scenario::ALL {
            assert_eq!(s.code().parse::<Scenario>().unwrap(), s);
        }
        assert!("4T".parse::<Scenario>().is_err());
        assert!(Scenario::AdaptiveTargeted.is_targeted());
        assert_eq!(Scenario::LabelFlipUntargeted.default_pollution(), 0.8);
    }
}
