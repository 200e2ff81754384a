//! Campaign configuration, read from TOML.
//!
//! ```toml
//! seed = 1
//! trials = 1000
//!
//! [population]
//! n_clients = 200
//! n_remotes = 200
//! n_relays = 8
//! relays_per_remote = 2
//! port_mapping_prevalence = 0.0
//! # edm_share = 0.11          # overrides the symmetric share of both mixes
//!
//! [population.nat_mix]
//! public = 0.0
//! fullcone = 0.05
//! restricted = 0.15
//! port_restricted = 0.69
//! symmetric = 0.11
//!
//! [latency]
//! client_access_ms = [5.0, 60.0]
//! jitter_ratio = 0.1
//!
//! [strategies]
//! refined_wait = false
//! role_alternation = false
//! quic_roles = "base"
//! priming = "off"            # or "naive", or { low-ttl = 3 }
//!
//! [policy]
//! transport_filter = "random" # none | random | tcp | quic
//! ```
//!
//! `[strategies]` is shorthand for `[dcutr.strategies]`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::campaign::{LatencySpec, Policy, PopulationSpec};
use crate::dcutr::{DcutrConfig, Strategies};
use crate::relay::RelayConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config syntax: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub seed: u64,
    pub trials: u64,
    pub population: PopulationSpec,
    pub latency: LatencySpec,
    pub policy: Policy,
    pub dcutr: DcutrConfig,
    pub relay: RelayConfig,
    #[serde(skip_serializing)]
    pub strategies: Option<Strategies>,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            seed: 1,
            trials: 1000,
            population: PopulationSpec::default(),
            latency: LatencySpec::default(),
            policy: Policy::default(),
            dcutr: DcutrConfig::default(),
            relay: RelayConfig::default(),
            strategies: None,
        }
    }
}

impl CampaignConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let mut cfg: CampaignConfig = toml::from_str(text)?;
        if let Some(s) = cfg.strategies.take() {
            cfg.dcutr.strategies = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.trials == 0 {
            return bad("trials must be >= 1".into());
        }
        self.population.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.latency.validate().map_err(ConfigError::Invalid)?;
        if !(1..=3).contains(&self.dcutr.max_attempts) {
            return bad(format!("dcutr.max_attempts must be 1..=3, got {}", self.dcutr.max_attempts));
        }
        if let Some(ttl) = self.dcutr.strategies.priming.checked_ttl() {
            crate::strategy::ttl_priming_schedule(ttl, self.latency.hop_distance).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if let Some(b) = self.dcutr.strategies.birthday {
            for sc in [crate::strategy::Scenario::EdmVsEim, crate::strategy::Scenario::EdmVsEdm] {
                b.plan(sc).validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            }
        }
        for (name, v) in [
            ("dcutr.attempt_deadline_ms", self.dcutr.attempt_deadline_ms),
            ("dcutr.stream_timeout_ms", self.dcutr.stream_timeout_ms),
            ("dcutr.reversal_timeout_ms", self.dcutr.reversal_timeout_ms),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(1..=10).contains(&self.dcutr.rtt_samples) {
            return bad("dcutr.rtt_samples must be 1..=10".into());
        }
        if self.dcutr.dummy_packets == 0 {
            return bad("dcutr.dummy_packets must be >= 1".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form. Seed, trial count and the
    /// serial/parallel switch are excluded.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("seed");
            o.remove("trials");
            if let Some(p) = o.get_mut("policy").and_then(|p| p.as_object_mut()) {
                p.remove("parallel");
            }
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}
