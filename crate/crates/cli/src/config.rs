//! Run configuration file shared by `train`, `gradcheck` and `sweep`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ctas_core::evaluation::DEFAULT_PREFIXES;
use ctas_core::model::ModelConfig;
use ctas_core::training::TrainConfig;

use crate::error::{CliResult, Code, Failure, WithCode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Per-goal share of sequences used for training.
    pub train_fraction: f64,
    /// Defaults to `train.seed`.
    pub seed: Option<u64>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train_fraction: 0.8, seed: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub prefixes: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { prefixes: DEFAULT_PREFIXES.to_vec() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub eval: EvalConfig,
    /// Corpus used when no `--data` flag is given.
    pub data: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::msg(Code::Io, format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).code(Code::Config)
    }

    pub fn split_seed(&self) -> u64 {
        self.split.seed.unwrap_or(self.train.seed)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.train.validate()?;
        let f = self.split.train_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Failure::msg(Code::Config, format!("split.train_fraction {f} must lie in (0, 1)")));
        }
        if let Some(f) = self.eval.prefixes.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Failure::msg(Code::Config, format!("eval prefix {f} outside (0, 1]")));
        }
        Ok(())
    }
}
