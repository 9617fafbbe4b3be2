//! Model configuration, parameter initialization and the shared forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Action, ClusterMap, DataError, Vocab};
use crate::encoder::{self, Bound, EncoderConfig, EncoderState};
use crate::heads::{self, GoalDist, MarkDist, TimeDensity};
use crate::numerics::{NumericError, ParamStore, Tape, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("prefix of length {len} exceeds positional capacity {max_len}")]
    Capacity { len: usize, max_len: usize },
    #[error("{component} is not finite for sequence {sequence}")]
    NonFinite { component: &'static str, sequence: String },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Base,
    /// Adds the permutation-invariant set embedding to every head.
    PlusPlus,
}

/// Weights of the set embedding in each head.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Alphas {
    pub mark: f64,
    pub time: f64,
    pub goal: f64,
}

impl Default for Alphas {
    fn default() -> Self {
        Self { mark: 0.1, time: 0.1, goal: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Number of duration clusters `M`.
    pub num_clusters: usize,
    pub variant: Variant,
    pub alpha: Alphas,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            num_clusters: 8,
            variant: Variant::Base,
            alpha: Alphas::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate().map_err(ModelError::Config)?;
        if self.num_clusters == 0 {
            return Err(ModelError::Config("num_clusters must be positive".into()));
        }
        let a = self.alpha;
        if ![a.mark, a.time, a.goal].iter().all(|v| v.is_finite()) {
            return Err(ModelError::Config("alpha weights must be finite".into()));
        }
        Ok(())
    }
}

/// Tape handles for one forward pass over `k` encoded actions.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// k×D history embeddings.
    pub states: Var,
    /// k×D set embeddings (set variant only).
    pub set: Option<Var>,
    /// k×(|C|+1) next-mark log-probabilities.
    pub mark_logp: Var,
    /// k×1 lognormal location of the next gap.
    pub mu: Var,
    /// k×1 lognormal variance of the next gap.
    pub var: Var,
    /// k×|G| goal log-probabilities.
    pub goal_logp: Var,
}

/// Plain-value predictions after action `k` of a prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct StepPrediction {
    pub mark: MarkDist,
    pub time: TimeDensity,
    pub goal: GoalDist,
}

/// Trained or freshly initialized model with everything needed for inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub clusters: ClusterMap,
    pub vocab: Vocab,
    /// Divides times and gaps before they enter the input embedding.
    pub time_scale: f64,
}

impl Model {
    /// Creates all parameters. `config.encoder.max_len` must already be
    /// resolved to a positive table size.
    pub fn init(
        config: ModelConfig,
        vocab: Vocab,
        clusters: ClusterMap,
        time_scale: f64,
        seed: u64,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        if config.encoder.max_len == 0 {
            return Err(ModelError::Config("encoder.max_len must be resolved before init".into()));
        }
        if clusters.num_clusters() != config.num_clusters {
            return Err(ModelError::Config(format!(
                "cluster map has {} clusters, config asks for {}",
                clusters.num_clusters(),
                config.num_clusters
            )));
        }
        if clusters.assignment().len() != vocab.num_marks() + 1 {
            return Err(ModelError::Config("cluster map does not cover the vocabulary".into()));
        }
        if !(time_scale > 0.0 && time_scale.is_finite()) {
            return Err(ModelError::Config(format!("time_scale {time_scale} must be positive")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.encoder.d_model;
        encoder::init_params(&mut params, &config.encoder, vocab.num_marks(), &mut rng)?;
        if config.variant == Variant::PlusPlus {
            encoder::init_set_params(&mut params, d, &mut rng)?;
        }
        heads::init_params(
            &mut params,
            d,
            vocab.num_marks() + 1,
            vocab.num_goals(),
            config.num_clusters,
            &mut rng,
        )?;
        Ok(Self { config, params, clusters, vocab, time_scale })
    }

    pub fn max_len(&self) -> usize {
        self.config.encoder.max_len
    }

    fn check_prefix(&self, actions: &[Action]) -> Result<(), ModelError> {
        if actions.is_empty() {
            return Err(NumericError::Contract("empty prefix".into()).into());
        }
        if actions.len() > self.max_len() {
            return Err(ModelError::Capacity { len: actions.len(), max_len: self.max_len() });
        }
        if let Some(a) = actions.iter().find(|a| a.mark >= self.vocab.num_marks()) {
            return Err(DataError::UnknownMark(format!("id {}", a.mark)).into());
        }
        Ok(())
    }

    /// Records the full forward pass over `actions` (no EOS) using `p`.
    pub fn forward(&self, tape: &Tape, p: &Bound, actions: &[Action]) -> Result<Forward, ModelError> {
        self.check_prefix(actions)?;
        let y = encoder::embed(tape, p, actions, self.time_scale)?;
        let h0 = encoder::add_positions(tape, p, y)?;
        let states = encoder::encode(tape, p, &self.config.encoder, h0)?;
        let set = match self.config.variant {
            Variant::Base => None,
            Variant::PlusPlus => Some(encoder::set_embed(tape, p, y)?),
        };
        let alpha = self.config.alpha;
        let hm = heads::fuse(tape, states, set, alpha.mark)?;
        let ht = heads::fuse(tape, states, set, alpha.time)?;
        let hg = heads::fuse(tape, states, set, alpha.goal)?;
        let clusters = actions
            .iter()
            .map(|a| {
                self.clusters
                    .cluster_of(a.mark)
                    .ok_or_else(|| DataError::UnknownMark(format!("id {} has no cluster", a.mark)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mark_logp = heads::mark_log_probs(tape, p, hm)?;
        let (mu, var) = heads::time_params(tape, p, ht, &clusters)?;
        let goal_logp = heads::goal_log_probs(tape, p, hg)?;
        Ok(Forward { states, set, mark_logp, mu, var, goal_logp })
    }

    /// Predictions after every action of `actions`.
    pub fn predict(&self, actions: &[Action]) -> Result<Vec<StepPrediction>, ModelError> {
        let tape = Tape::new();
        let p = self.params.bind(&tape)?;
        let f = self.forward(&tape, &p, actions)?;
        let marks = tape.value(f.mark_logp);
        let goals = tape.value(f.goal_logp);
        let mu = tape.value(f.mu);
        let var = tape.value(f.var);
        (0..actions.len())
            .map(|k| {
                Ok(StepPrediction {
                    mark: MarkDist(marks.row(k).iter().map(|v| v.exp()).collect()),
                    time: TimeDensity::new(mu.values()[k], var.values()[k])?,
                    goal: GoalDist(goals.row(k).iter().map(|v| v.exp()).collect()),
                })
            })
            .collect()
    }

    /// History (and set) embeddings of `actions`.
    pub fn encode(&self, actions: &[Action]) -> Result<EncoderState, ModelError> {
        let tape = Tape::new();
        let p = self.params.bind(&tape)?;
        let f = self.forward(&tape, &p, actions)?;
        Ok(EncoderState { states: tape.value(f.states), set: f.set.map(|x| tape.value(x)) })
    }
}
