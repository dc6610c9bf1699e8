use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synthetic::SyntheticParams;
use crate::error::{Error, Result};
use crate::graph::{KeepRule, SensorGraph, DEFAULT_EPSILON};
use crate::model::{Ablation, Hyper};
use crate::training::TrainConfig;

/// Everything a CLI run needs, read from TOML. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub ablation: Ablation,
    pub data: DataConfig,
    pub graph: GraphConfig,
    pub model: Hyper,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            ablation: Ablation::None,
            data: DataConfig::default(),
            graph: GraphConfig::default(),
            model: Hyper::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub speeds: Option<PathBuf>,
    pub distances: Option<PathBuf>,
    /// Cell value treated as missing, e.g. `0.0` for PEMS-style exports.
    pub missing_sentinel: Option<f64>,
    /// Used when no files are given or `--synthetic` is passed.
    pub synthetic: SyntheticParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub keep_rule: KeepRule,
    pub epsilon: f64,
    /// Kernel width; defaults to the standard deviation of the distances.
    pub sigma: Option<f64>,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            keep_rule: KeepRule::Kernel,
            epsilon: DEFAULT_EPSILON,
            sigma: None,
        }
    }
}

impl GraphConfig {
    pub fn apply(&self, graph: &mut SensorGraph) {
        graph.epsilon = self.epsilon;
        if let Some(s) = self.sigma {
            graph.sigma = s;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Leading share of the timeline used for training; the rest is the
    /// test period.
    pub train_fraction: f64,
    /// Seeds for pseudo-unobserved node draws; empty means the run seed.
    pub seeds: Vec<u64>,
    pub knn_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            train_fraction: 0.7,
            seeds: Vec::new(),
            knn_k: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("runs") }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Usage(format!("invalid config: {e}")))?;
        cfg.train.seed = cfg.seed;
        cfg.validate(None)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Usage(m) => Error::Usage(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Usage(e.to_string()))
    }

    /// Seeds used for evaluation draws.
    pub fn eval_seeds(&self) -> Vec<u64> {
        if self.eval.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.eval.seeds.clone()
        }
    }

    /// Rejects every setting the model, training or evaluation code would
    /// reject; `nodes` adds the graph-size checks once the data is known.
    pub fn validate(&self, nodes: Option<usize>) -> Result<()> {
        self.model.validate(nodes)?;
        self.train.validate()?;
        if !(0.0..1.0).contains(&self.graph.epsilon) {
            return Err(Error::param(format!("epsilon {} outside [0, 1)", self.graph.epsilon)));
        }
        if let Some(s) = self.graph.sigma {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::param(format!("sigma {s} must be positive")));
            }
        }
        if !(self.eval.train_fraction > 0.0 && self.eval.train_fraction < 1.0) {
            return Err(Error::param(format!(
                "train_fraction {} outside (0, 1)",
                self.eval.train_fraction
            )));
        }
        if self.eval.knn_k == 0 {
            return Err(Error::param("knn_k must be at least 1"));
        }
        if self.data.speeds.is_some() != self.data.distances.is_some() {
            return Err(Error::Usage("data.speeds and data.distances must be given together".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml_str("").unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(
            RunConfig::from_toml_str("[model]\nd_modle = 8\n"),
            Err(Error::Usage(_))
        ));
        assert!(RunConfig::from_toml_str("[model]\nd_model = 10\nn_heads = 4\n").is_err());
        assert!(RunConfig::from_toml_str("[train]\nmask_ratio = 1.0\n").is_err());
        assert!(RunConfig::from_toml_str("[eval]\ntrain_fraction = 0\n").is_err());
        assert!(RunConfig::from_toml_str("[graph]\nepsilon = 1.5\n").is_err());
        assert!(RunConfig::from_toml_str("ablation = \"no_XYZ\"\n").is_err());
        let cfg = RunConfig::from_toml_str("seed = 7\nablation = \"no_MSIA\"\n[graph]\nkeep_rule = \"literal\"\n").unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.ablation, Ablation::NoMsia);
        assert_eq!(cfg.graph.keep_rule, KeepRule::Literal);
    }
}
