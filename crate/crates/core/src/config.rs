//! Flat key-value run configuration.
//!
//! A TOML document of top-level keys; any key may be overridden by a value
//! parsed from the command line. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{ModelKind, Scenario, ScenarioConfig, ValidationSource};
use crate::models::{ForestConfig, HoeffdingConfig, LearningRate, SgdHyper, SplitCriterion};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Prepared data directory written by `prepare`.
    pub data: PathBuf,
    pub out: PathBuf,
    pub scenario: Scenario,
    pub model: ModelKind,
    pub rounds: usize,
    pub batch_size: usize,
    /// Principal components kept; 0 feeds the raw features unchanged.
    pub pca_k: usize,
    pub seed: u64,
    pub threads: usize,
    pub validation_source: ValidationSource,

    /// `constant` or `inverse_scaling`.
    pub learning_rate: String,
    pub eta0: f64,
    pub decay: f64,
    pub l2: f64,
    pub epochs: usize,

    pub delta: f64,
    pub grace_period: u64,
    pub tie_threshold: f64,
    pub split_criterion: SplitCriterion,
    pub n_thresholds: usize,
    pub min_branch_fraction: f64,

    pub n_trees: usize,
    /// Features per forest tree; 0 means `ceil(sqrt(k))`.
    pub max_features: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sc = ScenarioConfig::default();
        let tree = HoeffdingConfig::default();
        let forest = ForestConfig::default();
        let sgd = SgdHyper::default();
        let (eta0, decay) = match sgd.learning_rate {
            LearningRate::Constant { eta0 } => (eta0, 0.0),
            LearningRate::InverseScaling { eta0, decay } => (eta0, decay),
        };
        Self {
            data: PathBuf::from("prepared"),
            out: PathBuf::from("run"),
            scenario: sc.scenario,
            model: sc.model,
            rounds: sc.rounds,
            batch_size: sc.batch_size,
            pca_k: 22,
            seed: sc.seed,
            threads: sc.threads,
            validation_source: sc.validation_source,
            learning_rate: "constant".into(),
            eta0,
            decay,
            l2: sgd.l2,
            epochs: sgd.epochs,
            delta: tree.delta,
            grace_period: tree.grace_period,
            tie_threshold: tree.tie_threshold,
            split_criterion: tree.split_criterion,
            n_thresholds: tree.n_thresholds,
            min_branch_fraction: tree.min_branch_fraction,
            n_trees: forest.n_trees,
            max_features: 0,
        }
    }
}

impl RunConfig {
    /// Reads `path` (if any), applies `overrides` on top, and validates.
    pub fn load(path: Option<&Path>, overrides: toml::Table) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        table.extend(overrides);
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.scenario_config()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn sgd(&self) -> Result<SgdHyper> {
        let learning_rate = match self.learning_rate.as_str() {
            "constant" => LearningRate::Constant { eta0: self.eta0 },
            "inverse_scaling" => LearningRate::InverseScaling {
                eta0: self.eta0,
                decay: self.decay,
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown learning_rate `{other}` (expected constant or inverse_scaling)"
                )))
            }
        };
        Ok(SgdHyper {
            learning_rate,
            l2: self.l2,
            epochs: self.epochs,
        })
    }

    pub fn scenario_config(&self) -> Result<ScenarioConfig> {
        let tree = HoeffdingConfig {
            delta: self.delta,
            grace_period: self.grace_period,
            tie_threshold: self.tie_threshold,
            split_criterion: self.split_criterion,
            value_range: None,
            n_thresholds: self.n_thresholds,
            min_branch_fraction: self.min_branch_fraction,
        };
        let cfg = ScenarioConfig {
            scenario: self.scenario,
            model: self.model,
            rounds: self.rounds,
            batch_size: self.batch_size,
            seed: self.seed,
            sgd: self.sgd()?,
            tree,
            forest: ForestConfig {
                n_trees: self.n_trees,
                max_features: (self.max_features > 0).then_some(self.max_features),
                tree,
            },
            validation_source: self.validation_source,
            threads: self.threads,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.scenario_config().unwrap(), ScenarioConfig {
            seed: cfg.seed,
            ..ScenarioConfig::default()
        });
    }

    #[test]
    fn overrides_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "scenario = \"CFL\"\nmodel = \"svm\"\nrounds = 5\n").unwrap();
        let mut over = toml::Table::new();
        over.insert("rounds".into(), toml::Value::Integer(7));
        let cfg = RunConfig::load(Some(&path), over).unwrap();
        assert_eq!(cfg.scenario, Scenario::Cfl);
        assert_eq!(cfg.model, ModelKind::Svm);
        assert_eq!(cfg.rounds, 7);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        let mut over = toml::Table::new();
        over.insert("round".into(), toml::Value::Integer(7));
        assert!(matches!(RunConfig::load(None, over), Err(Error::Config(_))));
        let mut over = toml::Table::new();
        over.insert("rounds".into(), toml::Value::Integer(0));
        assert!(matches!(RunConfig::load(None, over), Err(Error::Config(_))));
        let mut over = toml::Table::new();
        over.insert("learning_rate".into(), toml::Value::String("adam".into()));
        assert!(matches!(RunConfig::load(None, over), Err(Error::Config(_))));
    }
}
