//! TOML experiment configuration.
//!
//! Every section and field is optional; omitted values take the defaults
//! shown by `ExperimentConfig::default()`. Unknown keys are rejected.
//!
//! ```toml
//! rounds = 500
//! seeds = [0, 1, 2, 3, 4]
//! policies = ["online", "allin", "aaba", "gs"]
//! output_dir = "out"
//!
//! [channel]
//! num_devices = 20
//! total_bandwidth = 10e6
//!
//! [scheduler]
//! delay_budget_per_bit = 2e-6   # seconds per payload bit
//! # delay_budget_seconds = 0.1  # absolute override
//! zeta0 = 10.0
//! zeta_decay = 1e-3
//! queue_variant = "alg1"
//!
//! [model]
//! learning_rate = 0.1
//! rank = 4
//!
//! [bound]
//! pl_constant = 0.1
//! probe_every = 25
//! variance_batches = 16
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::ChannelConfig;
use crate::error::{Error, Result};
use crate::fedft::model::ModelConfig;
use crate::fedft::training::RunSpec;
use crate::scheduler::{Policy, QueueVariant, SchedulerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerSection {
    /// Delay budget per payload bit; the round budget is this times the
    /// payload size.
    pub delay_budget_per_bit: f64,
    /// Absolute round budget in seconds; takes precedence when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delay_budget_seconds: Option<f64>,
    pub zeta0: f64,
    pub zeta_decay: f64,
    pub queue_variant: QueueVariant,
    pub full_scan: bool,
}

impl Default for SchedulerSection {
    fn default() -> Self {
        let base = SchedulerConfig::default();
        Self {
            delay_budget_per_bit: 2e-6,
            delay_budget_seconds: None,
            zeta0: base.zeta0,
            zeta_decay: base.zeta_decay,
            queue_variant: base.queue_variant,
            full_scan: base.full_scan,
        }
    }
}

/// Settings for the bound curve emitted next to each run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundSection {
    /// PL constant `tau`; not observable, so supplied here.
    pub pl_constant: f64,
    /// Rounds between full-gradient probes for the smoothness estimate.
    pub probe_every: usize,
    /// Minibatch gradients drawn per device for the variance estimate.
    pub variance_batches: usize,
}

impl Default for BoundSection {
    fn default() -> Self {
        Self {
            pl_constant: 0.1,
            probe_every: 25,
            variance_batches: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub rounds: usize,
    pub seeds: Vec<u64>,
    pub policies: Vec<Policy>,
    pub output_dir: PathBuf,
    pub channel: ChannelConfig,
    pub scheduler: SchedulerSection,
    pub model: ModelConfig,
    pub bound: BoundSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            rounds: 500,
            seeds: vec![0, 1, 2, 3, 4],
            policies: Policy::ALL.to_vec(),
            output_dir: PathBuf::from("out"),
            channel: ChannelConfig::default(),
            scheduler: SchedulerSection::default(),
            model: ModelConfig::default(),
            bound: BoundSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.policies.is_empty() {
            return Err(Error::Config("at least one policy is required".into()));
        }
        let s = &self.scheduler;
        if !(s.delay_budget_per_bit > 0.0 && s.delay_budget_per_bit.is_finite()) {
            return Err(Error::Config("delay_budget_per_bit must be > 0".into()));
        }
        if let Some(d) = s.delay_budget_seconds {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::Config("delay_budget_seconds must be > 0".into()));
            }
        }
        if !(self.bound.pl_constant >= 0.0 && self.bound.pl_constant.is_finite()) {
            return Err(Error::Config("pl_constant must be >= 0".into()));
        }
        if self.bound.probe_every == 0 || self.bound.variance_batches < 2 {
            return Err(Error::Config(
                "probe_every must be >= 1 and variance_batches >= 2".into(),
            ));
        }
        self.channel.validate()?;
        self.model.validate(self.channel.num_devices)?;
        self.scheduler_config(Policy::Online).validate()
    }

    /// Round delay budget `Dbar` in seconds.
    pub fn delay_budget(&self) -> f64 {
        self.scheduler
            .delay_budget_seconds
            .unwrap_or(self.scheduler.delay_budget_per_bit * self.model.payload_bits() as f64)
    }

    pub fn scheduler_config(&self, policy: Policy) -> SchedulerConfig {
        SchedulerConfig {
            delay_budget: self.delay_budget(),
            zeta0: self.scheduler.zeta0,
            zeta_decay: self.scheduler.zeta_decay,
            policy,
            queue_variant: self.scheduler.queue_variant,
            full_scan: self.scheduler.full_scan,
        }
    }

    pub fn run_spec(&self, policy: Policy, seed: u64) -> RunSpec {
        RunSpec {
            channel: self.channel.clone(),
            scheduler: self.scheduler_config(policy),
            model: self.model.clone(),
            rounds: self.rounds,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert!((cfg.delay_budget() - 2e-6 * 53_248.0).abs() < 1e-15);
    }

    #[test]
    fn empty_document_is_default() {
        assert_eq!(
            ExperimentConfig::from_toml_str("").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn round_trip() {
        let mut cfg = ExperimentConfig {
            rounds: 7,
            seeds: vec![3, 9],
            policies: vec![Policy::Gs, Policy::Online],
            ..ExperimentConfig::default()
        };
        cfg.scheduler.delay_budget_seconds = Some(0.25);
        cfg.scheduler.queue_variant = QueueVariant::Eq16;
        cfg.channel.total_bandwidth = 5e6;
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
        assert_eq!(cfg.delay_budget(), 0.25);
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            "rounds = 3\nseeds = [1]\n[model]\nrank = 2\n[channel]\nnum_devices = 5\n",
        )
        .unwrap();
        assert_eq!(cfg.model.rank, 2);
        assert_eq!(cfg.model.embed_dim, 16);
        assert_eq!(cfg.channel.num_devices, 5);
        assert_eq!(cfg.policies, Policy::ALL.to_vec());
    }

    #[test]
    fn invalid_documents() {
        for bad in [
            "rounds = 0",
            "seeds = []",
            "policies = []",
            "policies = [\"fastest\"]",
            "unknown = 1",
            "[scheduler]\ndelay_budget_per_bit = -1.0",
            "[scheduler]\ndelay_budget_seconds = 0.0",
            "[model]\nrank = 0",
            "[channel]\nnum_devices = 0",
            "rounds = \"many\"",
            "[bound]\nvariance_batches = 1",
        ] {
            assert!(
                matches!(ExperimentConfig::from_toml_str(bad), Err(Error::Config(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn missing_file_is_config_error() {
        let err = ExperimentConfig::load(Path::new("/nonexistent/experiment.toml")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
