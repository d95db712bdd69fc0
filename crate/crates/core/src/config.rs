//! Experiment configuration.
//!
//! A TOML file with one table per subsystem. Every field has a default, and
//! unknown keys are rejected. `resolved()` fills in the data-dependent
//! defaults so the written echo re-runs identically.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::PerturbConfig;
use crate::error::{Error, Result};
use crate::numerics::{Activation, AdamConfig};
use crate::training::LocalConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Consistency plus inter-client relation matching at unlabeled clients.
    #[default]
    Fedirm,
    /// Consistency regularization only.
    FedConsistency,
    /// Supervised FedAvg over labeled clients; unlabeled clients unused.
    FedavgLabeledOnly,
    /// Supervised FedAvg with every client labeled.
    FedavgAllLabeled,
}

impl RunMode {
    pub const ALL: [RunMode; 4] = [
        RunMode::Fedirm,
        RunMode::FedConsistency,
        RunMode::FedavgLabeledOnly,
        RunMode::FedavgAllLabeled,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RunMode::Fedirm => "fedirm",
            RunMode::FedConsistency => "fed_consistency",
            RunMode::FedavgLabeledOnly => "fedavg_labeled_only",
            RunMode::FedavgAllLabeled => "fedavg_all_labeled",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown mode `{name}`")))
    }

    pub fn uses_unlabeled(self) -> bool {
        matches!(self, RunMode::Fedirm | RunMode::FedConsistency)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Blobs,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub spread: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    pub standardize: bool,
    /// Gaussian perturbation strength for vector data.
    pub noise_std: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Blobs,
            classes: 5,
            per_class: 286,
            dim: 16,
            spread: 0.4,
            images: None,
            labels: None,
            standardize: false,
            noise_std: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationSection {
    /// Number of training shards K.
    pub clients: usize,
    /// Labeled clients m (the first m shards).
    pub labeled: usize,
    /// Unlabeled clients n; defaults to `clients - labeled`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unlabeled: Option<usize>,
    pub rounds: usize,
}

impl Default for FederationSection {
    fn default() -> Self {
        Self {
            clients: 10,
            labeled: 2,
            unlabeled: None,
            rounds: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Relu,
            dropout: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    /// Defaults to 16 for synthetic data and 48 for image data.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub temperature: f64,
    pub mc_passes: usize,
    pub entropy_threshold: f64,
    pub warmup_horizon: usize,
    pub warmup_squared: bool,
    pub irm_weight: f64,
    pub unlabeled_uses_logits: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let local = LocalConfig::default();
        Self {
            batch_size: None,
            local_epochs: local.local_epochs,
            learning_rate: local.adam.learning_rate,
            beta1: local.adam.beta1,
            beta2: local.adam.beta2,
            epsilon: local.adam.epsilon,
            temperature: local.temperature,
            mc_passes: local.mc_passes,
            entropy_threshold: local.entropy_threshold,
            warmup_horizon: local.warmup_horizon,
            warmup_squared: local.warmup_squared,
            irm_weight: local.irm_weight,
            unlabeled_uses_logits: local.unlabeled_uses_logits,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: RunMode,
    pub seed: u64,
    pub data: DataSection,
    pub federation: FederationSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().replace('\n', " ")))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// Fills data-dependent defaults and mode-implied settings, then validates.
    pub fn resolved(&self) -> Result<Self> {
        let mut cfg = self.clone();
        if cfg.training.batch_size.is_none() {
            cfg.training.batch_size = Some(match cfg.data.source {
                DataSource::Blobs => 16,
                DataSource::Idx => 48,
            });
        }
        let fed = &mut cfg.federation;
        if cfg.mode == RunMode::FedavgAllLabeled {
            fed.labeled = fed.clients;
            fed.unlabeled = Some(0);
        } else if fed.unlabeled.is_none() {
            fed.unlabeled = Some(fed.clients.saturating_sub(fed.labeled));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let fed = &self.federation;
        if fed.clients < 1 || fed.labeled < 1 || fed.labeled > fed.clients {
            return Err(Error::Config(format!(
                "need 1 <= labeled ({}) <= clients ({})",
                fed.labeled, fed.clients
            )));
        }
        let unlabeled = fed.unlabeled.unwrap_or(fed.clients - fed.labeled);
        if fed.labeled + unlabeled > fed.clients {
            return Err(Error::Config(format!(
                "labeled ({}) + unlabeled ({unlabeled}) exceeds clients ({})",
                fed.labeled, fed.clients
            )));
        }
        if fed.rounds < 1 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if self.mode == RunMode::Fedirm && self.model.dropout == 0.0 {
            return Err(Error::Config("fedirm needs dropout > 0 for uncertainty estimation".into()));
        }
        if self.model.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        match self.data.source {
            DataSource::Blobs => {
                let d = &self.data;
                if d.classes < 2 || d.per_class < 1 || d.dim < 2 || !(d.spread > 0.0) {
                    return Err(Error::Config("blobs need classes>=2, per_class>=1, dim>=2, spread>0".into()));
                }
            }
            DataSource::Idx => {
                if self.data.images.is_none() || self.data.labels.is_none() {
                    return Err(Error::Config("idx source needs data.images and data.labels".into()));
                }
            }
        }
        self.local_config().validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn unlabeled_count(&self) -> usize {
        let fed = &self.federation;
        fed.unlabeled.unwrap_or(fed.clients.saturating_sub(fed.labeled))
    }

    /// Local training settings implied by the mode and training table.
    pub fn local_config(&self) -> LocalConfig {
        let t = &self.training;
        LocalConfig {
            batch_size: t.batch_size.unwrap_or(16),
            local_epochs: t.local_epochs,
            adam: AdamConfig {
                learning_rate: t.learning_rate,
                beta1: t.beta1,
                beta2: t.beta2,
                epsilon: t.epsilon,
            },
            perturb: PerturbConfig {
                noise_std: self.data.noise_std,
            },
            temperature: t.temperature,
            mc_passes: t.mc_passes,
            entropy_threshold: t.entropy_threshold,
            warmup_horizon: t.warmup_horizon,
            warmup_squared: t.warmup_squared,
            irm_weight: if self.mode == RunMode::Fedirm { t.irm_weight } else { 0.0 },
            unlabeled_uses_logits: t.unlabeled_uses_logits,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reported_protocol() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.federation.clients, 10);
        assert_eq!(cfg.federation.labeled, 2);
        assert_eq!(cfg.federation.rounds, 100);
        let t = &cfg.training;
        assert_eq!(t.temperature, 2.0);
        assert_eq!(t.mc_passes, 8);
        assert_eq!(t.entropy_threshold, std::f64::consts::LN_2);
        assert_eq!(t.warmup_horizon, 30);
        assert_eq!(t.local_epochs, 1);
        assert_eq!((t.beta1, t.beta2), (0.9, 0.99));
        assert_eq!(t.learning_rate, 1e-3);
        assert_eq!(cfg.model.dropout, 0.3);
        assert_eq!(cfg.model.hidden, vec![64, 64]);
    }

    #[test]
    fn batch_size_depends_on_source() {
        let r = ExperimentConfig::default().resolved().unwrap();
        assert_eq!(r.training.batch_size, Some(16));
        let mut img = ExperimentConfig::default();
        img.data.source = DataSource::Idx;
        img.data.images = Some("a".into());
        img.data.labels = Some("b".into());
        assert_eq!(img.resolved().unwrap().training.batch_size, Some(48));
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = ExperimentConfig::from_toml("[training]\nlearning_rat = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
        assert!(ExperimentConfig::from_toml("bogus = 1\n").is_err());
    }

    #[test]
    fn partial_tables_fill_defaults() {
        let cfg = ExperimentConfig::from_toml("mode = \"fed_consistency\"\n[federation]\nrounds = 5\n").unwrap();
        assert_eq!(cfg.mode, RunMode::FedConsistency);
        assert_eq!(cfg.federation.rounds, 5);
        assert_eq!(cfg.federation.clients, 10);
        assert_eq!(cfg.local_config().irm_weight, 0.0);
    }

    #[test]
    fn resolved_echo_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.training.entropy_threshold = std::f64::consts::LN_2;
        cfg.data.spread = 0.123456789012345;
        let r = cfg.resolved().unwrap();
        let back = ExperimentConfig::from_toml(&r.to_toml()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.resolved().unwrap(), r);
    }

    #[test]
    fn all_labeled_forces_m_equals_k() {
        let mut cfg = ExperimentConfig::default();
        cfg.mode = RunMode::FedavgAllLabeled;
        let r = cfg.resolved().unwrap();
        assert_eq!(r.federation.labeled, 10);
        assert_eq!(r.unlabeled_count(), 0);
    }

    #[test]
    fn invalid_counts_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.federation.labeled = 11;
        assert!(cfg.resolved().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.federation.unlabeled = Some(9);
        assert!(cfg.resolved().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.model.dropout = 0.0;
        assert!(cfg.resolved().is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in RunMode::ALL {
            assert_eq!(RunMode::parse(m.name()).unwrap(), m);
        }
        assert!(RunMode::parse("fedprox").is_err());
    }
}
