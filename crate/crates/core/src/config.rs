//! Experiment configuration: a single TOML file with exhaustive validation.
//!
//! Unknown keys are rejected. Defaults follow the reference setting: helper
//! list of 5, 2 replacements over a 30-round search horizon, updates every
//! 10 rounds, 10% sampling, 5 local epochs, batch 64, SGD at 1e-4 with
//! momentum 0.9, dropout 0.5.

use crate::error::{Error, Result};
use crate::federation::{TrainSettings, TrainingMode};
use crate::nn::{Activation, NetSpec};
use crate::protocol::{ProtocolSettings, RoundConfig, SelectionPolicy};
use crate::uncertainty::AblationMode;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Which scheduler drives the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// The full uncertainty-minimizing protocol.
    UmPfssl,
    /// Uniform global averaging with self-pseudo-labels.
    FedavgSemi,
    /// No communication, self-pseudo-labels only.
    LocalOnly,
    /// Control arm: random helper scores and random pseudo-label sources.
    RandomHelper,
}

impl Method {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "um_pfssl" => Ok(Method::UmPfssl),
            "fedavg_semi" => Ok(Method::FedavgSemi),
            "local_only" => Ok(Method::LocalOnly),
            "random_helper" => Ok(Method::RandomHelper),
            "" => Err(Error::Config("method must not be empty".into())),
            other => Err(Error::Config(format!(
                "unknown method '{other}', expected um_pfssl, fedavg_semi, local_only, or random_helper"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::UmPfssl => "um_pfssl",
            Method::FedavgSemi => "fedavg_semi",
            Method::LocalOnly => "local_only",
            Method::RandomHelper => "random_helper",
        }
    }
}

/// Data source: synthetic Gaussian blobs or an IDX image/label pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        class_count: usize,
        per_class: usize,
        #[serde(default = "defaults::cluster_spread")]
        cluster_spread: f64,
    },
    Idx {
        images: String,
        labels: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    pub clients: usize,
    pub alpha: f64,
    #[serde(default = "defaults::label_split_alpha")]
    pub label_split_alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Hidden-layer widths; input and output widths come from the dataset.
    pub hidden_widths: Vec<usize>,
    #[serde(default = "defaults::dropout_rate")]
    pub dropout_rate: f64,
    #[serde(default = "defaults::activation")]
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundSection {
    #[serde(default = "defaults::sample_rate")]
    pub sample_rate: f64,
    #[serde(default = "defaults::helper_capacity")]
    pub helper_capacity: usize,
    #[serde(default = "defaults::replace_count")]
    pub replace_count: usize,
    #[serde(default = "defaults::search_rounds")]
    pub search_rounds: usize,
    #[serde(default = "defaults::update_period")]
    pub update_period: usize,
    #[serde(default = "defaults::total_rounds")]
    pub total_rounds: usize,
    #[serde(default = "defaults::local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "defaults::mc_samples")]
    pub mc_samples: usize,
    #[serde(default)]
    pub restrict_maintenance_to_sampled: bool,
    /// Cap on the unlabeled points used for relation-score evaluation;
    /// unset evaluates the full set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncertainty_eval_cap: Option<usize>,
}

impl Default for RoundSection {
    fn default() -> Self {
        RoundSection {
            sample_rate: defaults::sample_rate(),
            helper_capacity: defaults::helper_capacity(),
            replace_count: defaults::replace_count(),
            search_rounds: defaults::search_rounds(),
            update_period: defaults::update_period(),
            total_rounds: defaults::total_rounds(),
            local_epochs: defaults::local_epochs(),
            mc_samples: defaults::mc_samples(),
            restrict_maintenance_to_sampled: false,
            uncertainty_eval_cap: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            learning_rate: defaults::learning_rate(),
            momentum: defaults::momentum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::warmup_epochs")]
    pub warmup_epochs: usize,
    #[serde(default = "defaults::training_mode")]
    pub mode: TrainingMode,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            batch_size: defaults::batch_size(),
            warmup_epochs: defaults::warmup_epochs(),
            mode: defaults::training_mode(),
        }
    }
}

mod defaults {
    use crate::federation::TrainingMode;
    use crate::nn::Activation;

    pub fn cluster_spread() -> f64 {
        0.5
    }
    pub fn label_split_alpha() -> f64 {
        0.5
    }
    pub fn dropout_rate() -> f64 {
        0.5
    }
    pub fn activation() -> Activation {
        Activation::Relu
    }
    pub fn sample_rate() -> f64 {
        0.1
    }
    pub fn helper_capacity() -> usize {
        5
    }
    pub fn replace_count() -> usize {
        2
    }
    pub fn search_rounds() -> usize {
        30
    }
    pub fn update_period() -> usize {
        10
    }
    pub fn total_rounds() -> usize {
        200
    }
    pub fn local_epochs() -> usize {
        5
    }
    pub fn mc_samples() -> usize {
        10
    }
    pub fn learning_rate() -> f64 {
        1e-4
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn warmup_epochs() -> usize {
        5
    }
    pub fn training_mode() -> TrainingMode {
        TrainingMode::TwoStep
    }
    pub fn ablation() -> String {
        "en+ta".into()
    }
    pub fn repeats() -> usize {
        1
    }
}

/// The full experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: String,
    #[serde(default = "defaults::ablation")]
    pub ablation: String,
    pub master_seed: u64,
    #[serde(default = "defaults::repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub parallel: bool,
    #[serde(default)]
    pub output_dir: Option<String>,
    pub dataset: DatasetConfig,
    pub partition: PartitionSection,
    pub model: ModelSection,
    #[serde(default)]
    pub round: RoundSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub training: TrainingSection,
}

impl ExperimentConfig {
    pub fn method(&self) -> Result<Method> {
        Method::parse(&self.method)
    }

    pub fn ablation_mode(&self) -> Result<AblationMode> {
        AblationMode::parse(&self.ablation)
    }

    /// The protocol view of this configuration for a given run seed.
    pub fn round_config(&self, seed: u64) -> RoundConfig {
        RoundConfig {
            client_count: self.partition.clients,
            sample_rate: self.round.sample_rate,
            helper_capacity: self.round.helper_capacity,
            replace_count: self.round.replace_count,
            search_rounds: self.round.search_rounds,
            update_period: self.round.update_period,
            total_rounds: self.round.total_rounds,
            local_epochs: self.round.local_epochs,
            mc_samples: self.round.mc_samples,
            seed,
        }
    }

    pub fn protocol_settings(&self, seed: u64) -> Result<ProtocolSettings> {
        let policy = match self.method()? {
            Method::RandomHelper => SelectionPolicy::Random,
            _ => SelectionPolicy::Corr,
        };
        Ok(ProtocolSettings {
            round: self.round_config(seed),
            train: TrainSettings {
                batch_size: self.training.batch_size,
                mode: self.training.mode,
            },
            ablation: self.ablation_mode()?,
            policy,
            restrict_maintenance_to_sampled: self.round.restrict_maintenance_to_sampled,
            uncertainty_eval_cap: self.round.uncertainty_eval_cap,
            parallel: self.parallel,
        })
    }

    /// Network spec for a known input dimension and class count.
    pub fn net_spec(&self, input_dim: usize, class_count: usize) -> Result<NetSpec> {
        let mut widths = Vec::with_capacity(self.model.hidden_widths.len() + 2);
        widths.push(input_dim);
        widths.extend_from_slice(&self.model.hidden_widths);
        widths.push(class_count);
        NetSpec::new(widths, self.model.dropout_rate, self.model.activation)
    }

    /// Everything checkable without touching the dataset.
    pub fn validate(&self) -> Result<()> {
        self.method()?;
        self.ablation_mode()?;
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be >= 1".into()));
        }
        if self.partition.clients < 2 {
            return Err(Error::Config("partition.clients must be >= 2".into()));
        }
        if !(self.partition.alpha > 0.0 && self.partition.alpha.is_finite()) {
            return Err(Error::Config("partition.alpha must be positive".into()));
        }
        if self.partition.label_split_alpha <= 0.0 || self.partition.label_split_alpha.is_nan() {
            return Err(Error::Config(
                "partition.label_split_alpha must be positive".into(),
            ));
        }
        match &self.dataset {
            DatasetConfig::Synthetic {
                class_count,
                per_class,
                cluster_spread,
            } => {
                if *class_count < 2 {
                    return Err(Error::Config("dataset.class_count must be >= 2".into()));
                }
                if *per_class < 1 {
                    return Err(Error::Config("dataset.per_class must be >= 1".into()));
                }
                if *cluster_spread < 0.0 || cluster_spread.is_nan() {
                    return Err(Error::Config(
                        "dataset.cluster_spread must be non-negative".into(),
                    ));
                }
            }
            DatasetConfig::Idx { images, labels } => {
                if images.is_empty() || labels.is_empty() {
                    return Err(Error::Config(
                        "dataset.images and dataset.labels required".into(),
                    ));
                }
            }
        }
        if self.model.hidden_widths.contains(&0) {
            return Err(Error::Config("model.hidden_widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.model.dropout_rate) {
            return Err(Error::Config(
                "model.dropout_rate must lie in [0, 1)".into(),
            ));
        }
        if self.optimizer.learning_rate <= 0.0 || self.optimizer.learning_rate.is_nan() {
            return Err(Error::Config(
                "optimizer.learning_rate must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.optimizer.momentum) {
            return Err(Error::Config(
                "optimizer.momentum must lie in [0, 1)".into(),
            ));
        }
        if self.training.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be >= 1".into()));
        }
        if self.round.uncertainty_eval_cap == Some(0) {
            return Err(Error::Config(
                "round.uncertainty_eval_cap must be >= 1 when set".into(),
            ));
        }
        // Protocol invariants (R <= M - 1, sampling bounds, nu >= 1).
        self.round_config(self.master_seed).validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }
}

/// Parses and validates a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_config_str(&text)
}

/// Parses and validates config text.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let config: ExperimentConfig =
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
method = "um_pfssl"
master_seed = 7

[dataset]
kind = "synthetic"
class_count = 4
per_class = 50

[partition]
clients = 100
alpha = 0.5

[model]
hidden_widths = [16]
"#;

    #[test]
    fn defaults_echo_the_reference_setting() {
        let config = parse_config_str(MINIMAL).unwrap();
        assert_eq!(config.round.helper_capacity, 5);
        assert_eq!(config.round.replace_count, 2);
        assert_eq!(config.round.search_rounds, 30);
        assert_eq!(config.round.update_period, 10);
        assert_eq!(config.round.sample_rate, 0.1);
        assert_eq!(config.round.local_epochs, 5);
        assert_eq!(config.round.total_rounds, 200);
        assert_eq!(config.training.batch_size, 64);
        assert_eq!(config.training.warmup_epochs, 5);
        assert_eq!(config.optimizer.learning_rate, 1e-4);
        assert_eq!(config.optimizer.momentum, 0.9);
        assert_eq!(config.model.dropout_rate, 0.5);
        assert_eq!(config.round.mc_samples, 10);
        assert_eq!(config.ablation, "en+ta");
        assert_eq!(config.method().unwrap(), Method::UmPfssl);
    }

    #[test]
    fn round_trip_serialization_is_identity() {
        let config = parse_config_str(MINIMAL).unwrap();
        let text = config.to_toml().unwrap();
        let reparsed = parse_config_str(&text).unwrap();
        assert_eq!(config, reparsed);
    }

    #[test]
    fn empty_method_is_rejected() {
        let text = MINIMAL.replace("um_pfssl", "");
        let err = parse_config_str(&text).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\nnot_a_key = 3\n");
        assert!(parse_config_str(&text).is_err());

        let text = MINIMAL.replace("[model]", "[model]\nwobble = 1");
        assert!(parse_config_str(&text).is_err());
    }

    #[test]
    fn replace_count_must_leave_room_for_self() {
        let text = format!("{MINIMAL}\n[round]\nhelper_capacity = 2\nreplace_count = 2\n");
        let err = parse_config_str(&text).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn validation_names_the_offending_field() {
        let text = MINIMAL.replace("alpha = 0.5", "alpha = -1.0");
        let err = parse_config_str(&text).unwrap_err().to_string();
        assert!(err.contains("alpha"), "error was: {err}");
    }

    #[test]
    fn net_spec_derives_widths_from_dataset() {
        let config = parse_config_str(MINIMAL).unwrap();
        let spec = config.net_spec(2, 4).unwrap();
        assert_eq!(spec.layer_widths, vec![2, 16, 4]);
        assert_eq!(spec.dropout_rate, 0.5);
    }

    #[test]
    fn idx_dataset_parses() {
        let text = MINIMAL.replace(
            "kind = \"synthetic\"\nclass_count = 4\nper_class = 50",
            "kind = \"idx\"\nimages = \"train-images.idx\"\nlabels = \"train-labels.idx\"",
        );
        let config = parse_config_str(&text).unwrap();
        assert!(matches!(config.dataset, DatasetConfig::Idx { .. }));
    }
}
