//! JSON run configuration.
//!
//! Only `dataset` and `strategy` are required; everything else has a default.
//! Unknown keys are rejected and every error names the offending key.
//!
//! ```json
//! {
//!   "dataset": { "synthetic": { "classes": 10, "dims": 32, "per_class": 500, "spread": 3.0 } },
//!   "partition": { "dirichlet": { "alpha": 0.1 } },
//!   "clients": 10,
//!   "rounds": 30,
//!   "strategy": { "kind": "fedprox", "mu": 0.01 },
//!   "normalize": true,
//!   "temperature": 0.5
//! }
//! ```

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::aggregation::{StrategyConfig, StrategyKind};
use crate::data::{DirichletConfig, SyntheticConfig};
use crate::nn::{Activation, OptimizerConfig, OptimizerKind, DEFAULT_LATENT_DIM};
use crate::normalization::DEFAULT_TEMPERATURE;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SyntheticConfig),
    Idx { images: PathBuf, labels: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionConfig {
    Dirichlet {
        alpha: f64,
        #[serde(default = "default_min_samples")]
        min_samples_per_client: usize,
        #[serde(default = "default_max_redraws")]
        max_redraws: usize,
    },
    /// One class group per client; identical groups split their samples.
    LabelSplit { groups: Vec<Vec<usize>> },
}

impl PartitionConfig {
    pub fn dirichlet(alpha: f64) -> Self {
        PartitionConfig::Dirichlet {
            alpha,
            min_samples_per_client: default_min_samples(),
            max_redraws: default_max_redraws(),
        }
    }
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self::dirichlet(0.5)
    }
}

fn default_min_samples() -> usize {
    DirichletConfig::DEFAULT_MIN_SAMPLES
}

fn default_max_redraws() -> usize {
    DirichletConfig::DEFAULT_MAX_REDRAWS
}

fn default_clients() -> usize {
    10
}

fn default_participation() -> f64 {
    1.0
}

fn default_rounds() -> usize {
    200
}

fn default_epochs() -> usize {
    2
}

fn default_batch_size() -> usize {
    64
}

fn default_hidden_layers() -> Vec<usize> {
    vec![DEFAULT_LATENT_DIM]
}

fn default_normalize() -> bool {
    true
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default = "default_clients")]
    pub clients: usize,
    /// Fraction of clients sampled each round.
    #[serde(default = "default_participation")]
    pub participation: f64,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_epochs")]
    pub local_epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Hidden widths; the last one is the latent dimension.
    #[serde(default = "default_hidden_layers")]
    pub hidden_layers: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub strategy: StrategyConfig,
    #[serde(default = "default_normalize")]
    pub normalize: bool,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    /// Record wall-clock round durations. Off by default so that repeated
    /// runs produce byte-identical metrics.
    #[serde(default)]
    pub timing: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// A configuration with defaults for everything but the two required keys.
    pub fn new(dataset: DatasetSource, strategy: StrategyConfig) -> Self {
        Self {
            dataset,
            partition: PartitionConfig::default(),
            clients: default_clients(),
            participation: default_participation(),
            rounds: default_rounds(),
            local_epochs: default_epochs(),
            batch_size: default_batch_size(),
            hidden_layers: default_hidden_layers(),
            activation: Activation::default(),
            optimizer: OptimizerConfig::default(),
            strategy,
            normalize: default_normalize(),
            temperature: default_temperature(),
            test_fraction: default_test_fraction(),
            seed: 0,
            timing: false,
            out: None,
        }
    }

    /// Parses and validates a JSON document.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value = Self::parse_unvalidated(text)?;
        value.validate()?;
        Ok(value)
    }

    /// Parses without range checks, so callers can apply overrides first.
    pub fn parse_unvalidated(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let key = if path == "." { "<root>".to_string() } else { path };
            Error::config(key, e.into_inner().to_string())
        })
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Range checks; the error names the first offending key.
    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, why: String| Err(Error::config(key, why));
        if let DatasetSource::Synthetic(s) = &self.dataset {
            if s.classes < 2 {
                return fail("dataset.synthetic.classes", format!("must be >= 2, got {}", s.classes));
            }
            if s.dims < 2 {
                return fail("dataset.synthetic.dims", format!("must be >= 2, got {}", s.dims));
            }
            if s.per_class < 1 {
                return fail("dataset.synthetic.per_class", "must be >= 1".into());
            }
            if !(s.spread >= 0.0 && s.spread.is_finite()) {
                return fail("dataset.synthetic.spread", format!("must be finite and >= 0, got {}", s.spread));
            }
        }
        if self.clients < 1 {
            return fail("clients", "must be >= 1".into());
        }
        match &self.partition {
            PartitionConfig::Dirichlet { alpha, .. } => {
                if !(*alpha > 0.0 && alpha.is_finite()) {
                    return fail("partition.dirichlet.alpha", format!("must be finite and > 0, got {alpha}"));
                }
                if self.clients < 2 {
                    return fail("clients", "Dirichlet partitioning needs at least 2 clients".into());
                }
            }
            PartitionConfig::LabelSplit { groups } => {
                if groups.len() != self.clients {
                    return fail(
                        "partition.label_split.groups",
                        format!("{} groups for {} clients", groups.len(), self.clients),
                    );
                }
            }
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return fail("participation", format!("must be in (0, 1], got {}", self.participation));
        }
        if self.local_epochs < 1 {
            return fail("local_epochs", "must be >= 1".into());
        }
        if self.batch_size < 1 {
            return fail("batch_size", "must be >= 1".into());
        }
        if self.hidden_layers.is_empty() || self.hidden_layers.contains(&0) {
            return fail("hidden_layers", "need at least one hidden layer, all widths > 0".into());
        }
        if let Err((k, why)) = self.optimizer.validate() {
            return fail(&format!("optimizer.{k}"), why);
        }
        if let Err((k, why)) = self.strategy.validate() {
            return fail(&format!("strategy.{k}"), why);
        }
        if self.strategy.kind == StrategyKind::Scaffold && self.optimizer.kind != OptimizerKind::Sgd {
            return fail("optimizer.kind", "SCAFFOLD requires plain SGD local steps".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail("temperature", format!("must be finite and > 0, got {}", self.temperature));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return fail("test_fraction", format!("must be in (0, 1), got {}", self.test_fraction));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "dataset": { "synthetic": { "classes": 3, "dims": 4, "per_class": 50 } },
        "strategy": { "kind": "fedavg" }
    }"#;

    fn key_of(err: Error) -> String {
        match err {
            Error::Config { key, .. } => key,
            other => panic!("expected config error, got {other}"),
        }
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = RunConfig::from_json_str(MINIMAL).unwrap();
        assert_eq!(cfg.local_epochs, 2);
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.temperature, 0.5);
        assert_eq!(cfg.hidden_layers, vec![128]);
        assert_eq!(cfg.optimizer, OptimizerConfig::default());
        assert!(cfg.normalize);
        assert_eq!(cfg.strategy, StrategyConfig::default());
    }

    #[test]
    fn range_errors_name_the_key() {
        let mut cfg = RunConfig::from_json_str(MINIMAL).unwrap();
        cfg.temperature = -1.0;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("temperature"));
        assert_eq!(key_of(err), "temperature");

        let mut cfg = RunConfig::from_json_str(MINIMAL).unwrap();
        cfg.strategy.beta = 1.0;
        assert_eq!(key_of(cfg.validate().unwrap_err()), "strategy.beta");

        let mut cfg = RunConfig::from_json_str(MINIMAL).unwrap();
        cfg.strategy.kind = StrategyKind::Scaffold;
        assert_eq!(key_of(cfg.validate().unwrap_err()), "optimizer.kind");
    }

    #[test]
    fn unknown_and_mistyped_keys_are_named() {
        let err = RunConfig::from_json_str(&MINIMAL.replace("\"strategy\"", "\"bogus\": 1, \"strategy\"")).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");

        let err =
            RunConfig::from_json_str(&MINIMAL.replace("\"kind\": \"fedavg\"", "\"kind\": \"fedavg\", \"mu\": \"big\""))
                .unwrap_err();
        assert_eq!(key_of(err), "strategy.mu");

        let err = RunConfig::from_json_str(&MINIMAL.replace("\"per_class\": 50", "\"per_class\": 50, \"noise\": 2"))
            .unwrap_err();
        assert!(err.to_string().contains("noise"), "{err}");

        let err = RunConfig::from_json_str(r#"{"dataset": {"synthetic": {"classes": 3, "dims": 4, "per_class": 5}}}"#)
            .unwrap_err();
        assert!(err.to_string().contains("strategy"), "{err}");
    }

    #[test]
    fn label_split_groups_must_match_clients() {
        let text = MINIMAL.replace(
            "\"strategy\"",
            "\"clients\": 3, \"partition\": {\"label_split\": {\"groups\": [[0], [1]]}}, \"strategy\"",
        );
        assert_eq!(key_of(RunConfig::from_json_str(&text).unwrap_err()), "partition.label_split.groups");
    }

    #[test]
    fn round_trips_through_json() {
        let mut cfg = RunConfig::from_json_str(MINIMAL).unwrap();
        cfg.partition = PartitionConfig::LabelSplit { groups: vec![vec![0, 1], vec![2]] };
        cfg.clients = 2;
        cfg.optimizer = OptimizerConfig::sgd(0.05);
        cfg.strategy = StrategyConfig { kind: StrategyKind::FedBabu, head_layer_index: Some(1), ..Default::default() };
        cfg.out = Some("runs/a".into());
        let again = RunConfig::from_json_str(&cfg.to_json_string()).unwrap();
        assert_eq!(cfg, again);
    }
}
