//! Adam optimization, model preparation from a raw corpus, checkpoints and
//! the per-epoch training log.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, append_eos, build_clusters, Ctas, DataError, Vocab};
use crate::model::{Model, ModelConfig, ModelError};
use crate::numerics::{GradStore, NumericError, ParamStore, Tensor};
use crate::objectives::{self, LossBreakdown, LossWeights, SequenceValues};

pub const CHECKPOINT_FORMAT: &str = "ctas-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const FINAL_CHECKPOINT: &str = "final.json";
pub const BEST_CHECKPOINT: &str = "best.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },
    #[error("no checkpoint at {0}")]
    NoCheckpoint(String),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl From<NumericError> for TrainError {
    fn from(e: NumericError) -> Self {
        TrainError::Model(e.into())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.display().to_string(), source }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub margin_weight: f64,
    pub l2_coeff: f64,
    pub gamma: f64,
    pub eos_time_term: bool,
    pub margins: bool,
    /// Gap placed before the appended EOS; `None` uses the median gap.
    pub eos_gap: Option<f64>,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
    /// Stop after this many epochs without a lower training loss; 0 disables.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 50,
            batch_size: 32,
            seed: 0,
            margin_weight: 0.1,
            l2_coeff: 1e-3,
            gamma: 0.9,
            eos_time_term: true,
            margins: true,
            eos_gap: None,
            lr_decay: 1.0,
            patience: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be a finite non-negative number", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive".into());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if !(self.margin_weight >= 0.0 && self.l2_coeff >= 0.0) {
            return bad("margin_weight and l2_coeff must be non-negative".into());
        }
        if let Some(g) = self.eos_gap {
            if !(g > 0.0 && g.is_finite()) {
                return bad(format!("eos_gap {g} must be positive"));
            }
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay {} must lie in (0, 1]", self.lr_decay));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            gamma: self.gamma,
            margin_weight: self.margin_weight,
            l2_coeff: self.l2_coeff,
            eos_time_term: self.eos_time_term,
            margins: self.margins,
        }
    }
}

/// First and second moment estimates plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: ParamStore,
    pub v: ParamStore,
    pub t: u64,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || {
            let mut s = ParamStore::new();
            for (n, t) in params.iter() {
                s.insert(n.clone(), Tensor::zeros(t.shape())).expect("unique names");
            }
            s
        };
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    /// One bias-corrected update of every parameter.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradStore, cfg: &TrainConfig, lr: f64) -> Result<(), NumericError> {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| NumericError::Contract(format!("no gradient for {name}")))?;
            let m = self.m.get_mut(name).ok_or_else(|| NumericError::Contract(format!("no moment for {name}")))?;
            let v = self.v.get_mut(name).ok_or_else(|| NumericError::Contract(format!("no moment for {name}")))?;
            for (((x, gi), mi), vi) in p
                .values_mut()
                .iter_mut()
                .zip(g.values())
                .zip(m.values_mut().iter_mut())
                .zip(v.values_mut().iter_mut())
            {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub nll: f64,
    pub goal_ce: f64,
    pub margin_goal: f64,
    pub margin_action: f64,
    pub l2: f64,
    pub total: f64,
    pub seconds: f64,
}

impl EpochLog {
    fn new(epoch: usize, b: LossBreakdown, seconds: f64) -> Self {
        Self {
            epoch,
            nll: b.nll,
            goal_ce: b.goal_ce,
            margin_goal: b.margin_goal,
            margin_action: b.margin_action,
            l2: b.l2,
            total: b.total,
            seconds,
        }
    }
}

/// Data-derived settings fixed at preparation time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepInfo {
    pub eos_gap: f64,
    /// Default generation length bound.
    pub gen_max_len: usize,
    pub longest_train: usize,
}

/// Builds the vocabulary action sets, clusters and an initialized model from
/// a raw training split, and returns the EOS-augmented training corpus.
///
/// `M` is reduced to the number of marks when it exceeds it.
pub fn prepare(
    train_raw: &[Ctas],
    mut vocab: Vocab,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(Model, Vec<Ctas>, PrepInfo), TrainError> {
    train_cfg.validate()?;
    model_cfg.validate()?;
    if train_raw.is_empty() {
        return Err(TrainError::Config("training corpus is empty".into()));
    }
    vocab.set_goal_actions(train_raw);
    let mut cfg = model_cfg.clone();
    if cfg.num_clusters > vocab.num_marks() {
        log::warn!("num_clusters {} exceeds {} marks; using {}", cfg.num_clusters, vocab.num_marks(), vocab.num_marks());
        cfg.num_clusters = vocab.num_marks();
    }
    let clusters = build_clusters(train_raw, &vocab, cfg.num_clusters, train_cfg.seed)?;
    let gaps: Vec<f64> = train_raw
        .iter()
        .flat_map(|s| s.actions.windows(2).map(|w| w[1].time - w[0].time))
        .collect();
    let mean_gap = if gaps.is_empty() { 1.0 } else { gaps.iter().sum::<f64>() / gaps.len() as f64 };
    let eos_gap = match train_cfg.eos_gap {
        Some(g) => g,
        None => data::median_gap(train_raw).unwrap_or(1.0),
    };
    let longest = train_raw.iter().map(Ctas::len).max().unwrap_or(1);
    let gen_max_len = ((1.5 * longest as f64).ceil() as usize).max(2);
    if cfg.encoder.max_len == 0 {
        cfg.encoder.max_len = gen_max_len + 1;
    } else if cfg.encoder.max_len < longest + 1 {
        return Err(TrainError::Config(format!(
            "encoder.max_len {} below longest training sequence + 1 ({})",
            cfg.encoder.max_len,
            longest + 1
        )));
    }
    let model = Model::init(cfg, vocab, clusters, mean_gap, train_cfg.seed)?;
    let eos = model.vocab.eos();
    let augmented = train_raw
        .iter()
        .map(|s| append_eos(s, eos, eos_gap))
        .collect::<Result<Vec<_>, _>>()?;
    let gen_max_len = gen_max_len.min(model.max_len());
    Ok((model, augmented, PrepInfo { eos_gap, gen_max_len, longest_train: longest }))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamRecord {
    t: u64,
    m: serde_json::Value,
    v: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    epoch: usize,
    best_total: Option<f64>,
    model_config: ModelConfig,
    train_config: TrainConfig,
    vocab: Vocab,
    clusters: data::ClusterMap,
    time_scale: f64,
    prep: PrepInfo,
    params: serde_json::Value,
    adam: AdamRecord,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub train_config: TrainConfig,
    pub prep: PrepInfo,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub best_total: Option<f64>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            epoch: self.epoch,
            best_total: self.best_total,
            model_config: self.model.config.clone(),
            train_config: self.train_config.clone(),
            vocab: self.model.vocab.clone(),
            clusters: self.model.clusters.clone(),
            time_scale: self.model.time_scale,
            prep: self.prep.clone(),
            params: self.model.params.to_value(),
            adam: AdamRecord { t: self.adam.t, m: self.adam.m.to_value(), v: self.adam.v.to_value() },
        };
        serde_json::to_string(&file).expect("checkpoint serialization")
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let f: CheckpointFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if f.format != CHECKPOINT_FORMAT || f.version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint {} v{}", f.format, f.version));
        }
        let params = ParamStore::from_value(f.params).map_err(|e| e.to_string())?;
        let model = Model {
            config: f.model_config,
            params,
            clusters: f.clusters,
            vocab: f.vocab,
            time_scale: f.time_scale,
        };
        let adam = Adam {
            m: ParamStore::from_value(f.adam.m).map_err(|e| e.to_string())?,
            v: ParamStore::from_value(f.adam.v).map_err(|e| e.to_string())?,
            t: f.adam.t,
        };
        Ok(Self { model, train_config: f.train_config, prep: f.prep, adam, epoch: f.epoch, best_total: f.best_total })
    }

    /// Writes atomically through a temporary file in the same directory.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, self.to_json()).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    /// Loads a checkpoint file, or `final.json` inside a directory.
    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let file: PathBuf = if path.is_dir() { path.join(FINAL_CHECKPOINT) } else { path.to_path_buf() };
        if !file.is_file() {
            return Err(TrainError::NoCheckpoint(file.display().to_string()));
        }
        let text = fs::read_to_string(&file).map_err(io_err(&file))?;
        Self::from_json(&text)
            .map_err(|message| TrainError::Checkpoint { path: file.display().to_string(), message })
    }
}

/// Owns the model and optimizer state across epochs.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub prep: PrepInfo,
    pub adam: Adam,
    pub epoch: usize,
    pub best_total: Option<f64>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, prep: PrepInfo) -> Result<Self, TrainError> {
        config.validate()?;
        let adam = Adam::new(&model.params);
        Ok(Self { model, config, prep, adam, epoch: 0, best_total: None })
    }

    pub fn from_checkpoint(c: Checkpoint) -> Result<Self, TrainError> {
        c.train_config.validate()?;
        Ok(Self {
            model: c.model,
            config: c.train_config,
            prep: c.prep,
            adam: c.adam,
            epoch: c.epoch,
            best_total: c.best_total,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train_config: self.config.clone(),
            prep: self.prep.clone(),
            adam: self.adam.clone(),
            epoch: self.epoch,
            best_total: self.best_total,
        }
    }

    fn epoch_order(&self, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.epoch as u64 + 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Gradient of the batch loss: per-sequence gradients summed in batch
    /// order, divided by the batch size, plus the L2 gradient.
    fn batch_gradient(
        &self,
        batch: &[&Ctas],
        w: &LossWeights,
    ) -> Result<(GradStore, Vec<SequenceValues>), ModelError> {
        let per_seq = batch
            .par_iter()
            .map(|s| {
                let mut g = GradStore::zeros_like(&self.model.params);
                let v = objectives::sequence_grad(&self.model, s, w, &mut g)?;
                Ok((g, v))
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        let mut total = GradStore::zeros_like(&self.model.params);
        let mut values = Vec::with_capacity(per_seq.len());
        for (g, v) in &per_seq {
            total.merge(g)?;
            values.push(*v);
        }
        total.scale(1.0 / batch.len() as f64);
        if w.l2_coeff > 0.0 {
            for (name, p) in self.model.params.iter() {
                let mut g = p.clone();
                g.values_mut().iter_mut().for_each(|v| *v *= 2.0 * w.l2_coeff);
                total.accumulate(name, &g)?;
            }
        }
        Ok((total, values))
    }

    /// One pass over `train` (EOS-augmented). The logged losses are the
    /// batch means seen before each update.
    pub fn run_epoch(&mut self, train: &[Ctas]) -> Result<EpochLog, TrainError> {
        if train.is_empty() {
            return Err(TrainError::Config("training corpus is empty".into()));
        }
        let start = Instant::now();
        let w = self.config.loss_weights();
        let order = self.epoch_order(train.len());
        let lr = self.config.lr * self.config.lr_decay.powi(self.epoch as i32);
        let epoch = self.epoch + 1;
        let mut values = Vec::with_capacity(train.len());
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&Ctas> = chunk.iter().map(|i| &train[*i]).collect();
            let (grads, v) = self
                .batch_gradient(&batch, &w)
                .map_err(|e| TrainError::Diverged { epoch, reason: e.to_string() })?;
            if !grads.all_finite() {
                return Err(TrainError::Diverged { epoch, reason: "non-finite gradient".into() });
            }
            self.adam.step(&mut self.model.params, &grads, &self.config, lr)?;
            if !self.model.params.iter().all(|(_, t)| t.all_finite()) {
                return Err(TrainError::Diverged { epoch, reason: "non-finite parameter".into() });
            }
            values.extend(v);
        }
        let breakdown = objectives::aggregate(&values, &self.model.params, &w);
        if !breakdown.is_finite() {
            return Err(TrainError::Diverged { epoch, reason: "non-finite loss".into() });
        }
        self.epoch = epoch;
        Ok(EpochLog::new(epoch, breakdown, start.elapsed().as_secs_f64()))
    }

    /// Trains until `config.epochs` epochs are complete (or early stopping).
    ///
    /// With `out_dir`, every completed epoch rewrites `final.json`, appends to
    /// the log, and refreshes `best.json` when the training loss improves; a
    /// divergent epoch leaves the previous files in place.
    pub fn fit(
        &mut self,
        train: &[Ctas],
        out_dir: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<Vec<EpochLog>, TrainError> {
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let mut logs = Vec::new();
        let mut stale = 0;
        while self.epoch < self.config.epochs {
            let entry = self.run_epoch(train)?;
            let improved = self.best_total.is_none_or(|b| entry.total < b);
            if improved {
                self.best_total = Some(entry.total);
                stale = 0;
            } else {
                stale += 1;
            }
            if let Some(dir) = out_dir {
                let ck = self.checkpoint();
                ck.save(&dir.join(FINAL_CHECKPOINT))?;
                if improved {
                    ck.save(&dir.join(BEST_CHECKPOINT))?;
                }
                let log_path = dir.join(TRAIN_LOG);
                let mut f = OpenOptions::new().create(true).append(true).open(&log_path).map_err(io_err(&log_path))?;
                writeln!(f, "{}", serde_json::to_string(&entry).expect("log serialization"))
                    .map_err(io_err(&log_path))?;
            }
            log::info!("epoch {} total {:.5} ({:.2}s)", entry.epoch, entry.total, entry.seconds);
            on_epoch(&entry);
            logs.push(entry);
            if self.config.patience > 0 && stale >= self.config.patience {
                log::info!("stopping early after {} epochs without improvement", stale);
                break;
            }
        }
        Ok(logs)
    }
}

/// Prepares a model from `train_raw` and trains it for `train_cfg.epochs`.
pub fn train(
    train_raw: &[Ctas],
    vocab: Vocab,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(Trainer, Vec<EpochLog>), TrainError> {
    let (model, augmented, prep) = prepare(train_raw, vocab, model_cfg, train_cfg)?;
    let mut trainer = Trainer::new(model, train_cfg.clone(), prep)?;
    let logs = trainer.fit(&augmented, out_dir, |_| {})?;
    Ok((trainer, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::synth::{generate, SynthSpec};

    fn small_model_cfg() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig { d_model: 8, heads: 2, blocks: 1, ..EncoderConfig::default() },
            num_clusters: 2,
            ..ModelConfig::default()
        }
    }

    fn corpus(n: usize) -> (Vec<Ctas>, Vocab) {
        generate(&SynthSpec::two_goal_demo(n, 21)).unwrap()
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut params = ParamStore::new();
        params.insert("x", Tensor::scalar(-2.0)).unwrap();
        let mut adam = Adam::new(&params);
        let cfg = TrainConfig::default();
        for _ in 0..500 {
            let x = params.get("x").unwrap().item();
            let mut g = GradStore::zeros_like(&params);
            g.accumulate("x", &Tensor::scalar(2.0 * (x - 3.0))).unwrap();
            adam.step(&mut params, &g, &cfg, 0.05).unwrap();
        }
        assert!((params.get("x").unwrap().item() - 3.0).abs() < 1e-3);
    }

    #[test]
    fn zero_gradient_step_is_identity() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::vector(vec![1.5, -0.25])).unwrap();
        let before = params.clone();
        let mut adam = Adam::new(&params);
        adam.step(&mut params, &GradStore::zeros_like(&before), &TrainConfig::default(), 0.1).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (c, vocab) = corpus(60);
        let cfg = TrainConfig { lr: 0.0, epochs: 2, ..TrainConfig::default() };
        let (model, aug, prep) = prepare(&c, vocab, &small_model_cfg(), &cfg).unwrap();
        let before = model.params.clone();
        let mut t = Trainer::new(model, cfg, prep).unwrap();
        t.fit(&aug, None, |_| {}).unwrap();
        assert_eq!(t.model.params, before);
    }

    #[test]
    fn loss_decreases_over_first_epochs() {
        let (c, vocab) = corpus(500);
        let cfg = TrainConfig { epochs: 5, ..TrainConfig::default() };
        let (_, logs) = train(&c, vocab, &small_model_cfg(), &cfg, None).unwrap();
        let totals: Vec<f64> = logs.iter().map(|l| l.total).collect();
        assert!(totals.windows(2).all(|w| w[1] < w[0]), "{totals:?}");
    }

    #[test]
    fn identical_seeds_give_identical_parameters() {
        let (c, vocab) = corpus(80);
        let cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
        let (a, _) = train(&c, vocab.clone(), &small_model_cfg(), &cfg, None).unwrap();
        let (b, _) = train(&c, vocab, &small_model_cfg(), &cfg, None).unwrap();
        assert_eq!(a.model.params, b.model.params);
    }

    #[test]
    fn resumed_run_matches_uninterrupted() {
        let (c, vocab) = corpus(80);
        let cfg = TrainConfig { epochs: 4, ..TrainConfig::default() };
        let (full, _) = train(&c, vocab.clone(), &small_model_cfg(), &cfg, None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let (model, aug, prep) = prepare(&c, vocab, &small_model_cfg(), &cfg).unwrap();
        let mut first = Trainer::new(model, TrainConfig { epochs: 2, ..cfg.clone() }, prep).unwrap();
        first.fit(&aug, Some(dir.path()), |_| {}).unwrap();
        let mut ck = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(ck.epoch, 2);
        ck.train_config.epochs = 4;
        let mut resumed = Trainer::from_checkpoint(ck).unwrap();
        resumed.fit(&aug, Some(dir.path()), |_| {}).unwrap();
        assert_eq!(resumed.model.params, full.model.params);
        let log = fs::read_to_string(dir.path().join(TRAIN_LOG)).unwrap();
        assert_eq!(log.lines().count(), 4);
        assert!(dir.path().join(BEST_CHECKPOINT).is_file());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let (c, vocab) = corpus(40);
        let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
        let (t, _) = train(&c, vocab, &small_model_cfg(), &cfg, None).unwrap();
        let ck = t.checkpoint();
        assert_eq!(Checkpoint::from_json(&ck.to_json()).unwrap(), ck);
    }

    #[test]
    fn missing_checkpoint_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(TrainError::NoCheckpoint(_))));
    }

    #[test]
    fn divergence_keeps_last_good_checkpoint() {
        let (c, vocab) = corpus(40);
        let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
        let dir = tempfile::tempdir().unwrap();
        let (model, aug, prep) = prepare(&c, vocab, &small_model_cfg(), &cfg).unwrap();
        let mut t = Trainer::new(model, cfg, prep).unwrap();
        t.fit(&aug, Some(dir.path()), |_| {}).unwrap();
        let saved = fs::read_to_string(dir.path().join(FINAL_CHECKPOINT)).unwrap();
        t.config.epochs = 3;
        t.config.lr = 1e300;
        assert!(matches!(t.fit(&aug, Some(dir.path()), |_| {}), Err(TrainError::Diverged { .. })));
        assert_eq!(fs::read_to_string(dir.path().join(FINAL_CHECKPOINT)).unwrap(), saved);
    }

    #[test]
    fn prepare_clamps_clusters_and_sizes_table() {
        let (c, vocab) = corpus(30);
        let (model, aug, prep) = prepare(&c, vocab, &ModelConfig::default(), &TrainConfig::default()).unwrap();
        assert_eq!(model.config.num_clusters, 6);
        assert!(aug.iter().all(|s| s.ends_with(model.vocab.eos())));
        assert_eq!(prep.gen_max_len, 9);
        assert_eq!(model.max_len(), 10);
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            TrainConfig { lr: -1.0, ..TrainConfig::default() },
            TrainConfig { beta1: 1.0, ..TrainConfig::default() },
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { gamma: 1.5, ..TrainConfig::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
