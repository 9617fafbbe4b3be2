//! Next-action, goal-detection and generation metrics, evaluation reports and
//! the hyperparameter sweep.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Action, Ctas, Vocab};
use crate::generation::{generate, GenRequest, SampleMode};
use crate::model::{Model, ModelConfig, ModelError, StepPrediction};
use crate::training::{self, TrainConfig, TrainError};

pub const DEFAULT_PREFIXES: [f64; 3] = [0.3, 0.6, 1.0];

/// Number of leading actions used for a prefix fraction: `⌈f·n⌉`, at least 1.
pub fn prefix_len(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n.max(1))
}

/// Map key for a prefix fraction, e.g. `"0.3"`.
pub fn prefix_key(fraction: f64) -> String {
    format!("{fraction:?}")
}

/// Per-sequence evaluation counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub id: String,
    pub goal: String,
    pub length: usize,
    /// Teacher-forced transitions scored.
    pub transitions: usize,
    pub correct_marks: usize,
    /// Sum of absolute time errors over the transitions.
    pub abs_time_error: f64,
    /// Goal predicted correctly at each prefix fraction.
    pub goal_correct: BTreeMap<String, bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generation: Option<GenRecord>,
}

/// Comparison of one generated sequence against the truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenRecord {
    /// Generated actions, EOS excluded.
    pub generated_length: usize,
    /// Truth positions after the given first action.
    pub compared: usize,
    pub correct_marks: usize,
    /// Positions present in both sequences, used for the time error.
    pub timed: usize,
    pub abs_time_error: f64,
    pub length_match: bool,
    pub reason: crate::generation::Termination,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sequences: usize,
    pub transitions: usize,
    pub apa: f64,
    pub mae: f64,
    pub gpa_at: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gen_apa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gen_mae: Option<f64>,
    pub seed: u64,
    pub config: serde_json::Value,
    pub records: Vec<SequenceRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenEvalOptions {
    pub seed: u64,
    pub mode: SampleMode,
    pub max_len: usize,
    pub eos_gap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub prefixes: Vec<f64>,
    pub generation: Option<GenEvalOptions>,
    pub seed: u64,
    pub config: serde_json::Value,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { prefixes: DEFAULT_PREFIXES.to_vec(), generation: None, seed: 0, config: serde_json::Value::Null }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn sorted_by_id(test: &[Ctas]) -> Vec<&Ctas> {
    let mut v: Vec<&Ctas> = test.iter().collect();
    v.sort_by(|a, b| a.id.cmp(&b.id));
    v
}

/// Teacher-forced one-step scoring of a sequence given its per-step predictions.
pub fn score_next_actions(seq: &Ctas, preds: &[StepPrediction]) -> (usize, usize, f64) {
    let mut correct = 0;
    let mut err = 0.0;
    let transitions = seq.len().saturating_sub(1);
    for k in 0..transitions {
        let next = seq.actions[k + 1];
        if preds[k].mark.argmax() == next.mark {
            correct += 1;
        }
        let t_hat = seq.actions[k].time + preds[k].time.point();
        err += (next.time - t_hat).abs();
    }
    (transitions, correct, err)
}

/// Compares the generated actions after the first with truth positions
/// `2..=|S|`; positions missing from the generation count as wrong marks.
pub fn score_generation(truth: &Ctas, generated: &[Action], reason: crate::generation::Termination) -> GenRecord {
    let compared = truth.len().saturating_sub(1);
    let mut correct = 0;
    let mut timed = 0;
    let mut err = 0.0;
    for k in 1..truth.len() {
        if let Some(g) = generated.get(k) {
            if g.mark == truth.actions[k].mark {
                correct += 1;
            }
            timed += 1;
            err += (g.time - truth.actions[k].time).abs();
        }
    }
    GenRecord {
        generated_length: generated.len(),
        compared,
        correct_marks: correct,
        timed,
        abs_time_error: err,
        length_match: generated.len() == truth.len(),
        reason,
    }
}

/// Fraction of records whose generated length equals the truth length.
pub fn correct_length_ratio(records: &[GenRecord]) -> f64 {
    ratio(records.iter().filter(|r| r.length_match).count(), records.len())
}

/// Fraction of `true` entries.
pub fn accuracy(hits: &[bool]) -> f64 {
    ratio(hits.iter().filter(|h| **h).count(), hits.len())
}

fn sequence_request(seed: u64, index: usize) -> u64 {
    seed.wrapping_add(index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ seed
}

fn evaluate_sequence(
    model: &Model,
    vocab: &Vocab,
    seq: &Ctas,
    index: usize,
    opts: &EvalOptions,
) -> Result<SequenceRecord, ModelError> {
    let preds = model.predict(&seq.actions)?;
    let (transitions, correct, err) = score_next_actions(seq, &preds);
    let goal_correct = opts
        .prefixes
        .iter()
        .map(|f| {
            let m = prefix_len(*f, seq.len());
            (prefix_key(*f), preds[m - 1].goal.argmax() == seq.goal)
        })
        .collect();
    let generation = match &opts.generation {
        None => None,
        Some(g) => {
            let req = GenRequest {
                goal: seq.goal,
                first: seq.actions[0],
                max_len: g.max_len,
                seed: sequence_request(g.seed, index),
                mode: g.mode,
                eos_gap: g.eos_gap,
            };
            let out = generate(model, &req, seq.id.clone())?;
            Some(score_generation(seq, out.actions(vocab.eos()), out.reason))
        }
    };
    Ok(SequenceRecord {
        id: seq.id.clone(),
        goal: vocab.goal_name(seq.goal).to_string(),
        length: seq.len(),
        transitions,
        correct_marks: correct,
        abs_time_error: err,
        goal_correct,
        generation,
    })
}

/// Recomputes summary metrics from per-sequence records in their stored order.
pub fn summarize(records: &[SequenceRecord], prefixes: &[f64]) -> (usize, f64, f64, BTreeMap<String, f64>) {
    let transitions: usize = records.iter().map(|r| r.transitions).sum();
    let correct: usize = records.iter().map(|r| r.correct_marks).sum();
    let err: f64 = records.iter().map(|r| r.abs_time_error).sum();
    let mae = if transitions == 0 { 0.0 } else { err / transitions as f64 };
    let gpa = prefixes
        .iter()
        .map(|f| {
            let key = prefix_key(*f);
            let hits: Vec<bool> = records.iter().map(|r| r.goal_correct.get(&key).copied().unwrap_or(false)).collect();
            (key, accuracy(&hits))
        })
        .collect();
    (transitions, ratio(correct, transitions), mae, gpa)
}

/// Generation metrics recomputed from records: `(cl, apa, mae)`.
pub fn summarize_generation(records: &[SequenceRecord]) -> Option<(f64, f64, f64)> {
    let gens: Vec<&GenRecord> = records.iter().filter_map(|r| r.generation.as_ref()).collect();
    if gens.is_empty() {
        return None;
    }
    let compared: usize = gens.iter().map(|g| g.compared).sum();
    let correct: usize = gens.iter().map(|g| g.correct_marks).sum();
    let timed: usize = gens.iter().map(|g| g.timed).sum();
    let err: f64 = gens.iter().map(|g| g.abs_time_error).sum();
    let cl = ratio(gens.iter().filter(|g| g.length_match).count(), gens.len());
    let mae = if timed == 0 { 0.0 } else { err / timed as f64 };
    Some((cl, ratio(correct, compared), mae))
}

/// Full evaluation of `model` on raw test sequences.
pub fn evaluate(model: &Model, test: &[Ctas], opts: &EvalOptions) -> Result<EvalReport, ModelError> {
    if let Some(f) = opts.prefixes.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(ModelError::Config(format!("prefix fraction {f} outside (0, 1]")));
    }
    let ordered = sorted_by_id(test);
    let records = ordered
        .par_iter()
        .enumerate()
        .map(|(i, s)| evaluate_sequence(model, &model.vocab, s, i, opts))
        .collect::<Result<Vec<_>, _>>()?;
    let (transitions, apa, mae, gpa_at) = summarize(&records, &opts.prefixes);
    let gen = summarize_generation(&records);
    Ok(EvalReport {
        sequences: records.len(),
        transitions,
        apa,
        mae,
        gpa_at,
        cl: gen.map(|g| g.0),
        gen_apa: gen.map(|g| g.1),
        gen_mae: gen.map(|g| g.2),
        seed: opts.seed,
        config: opts.config.clone(),
        records,
    })
}

/// `(apa, mae)` under teacher forcing.
pub fn next_action_eval(model: &Model, test: &[Ctas]) -> Result<(f64, f64), ModelError> {
    let opts = EvalOptions { prefixes: vec![], ..EvalOptions::default() };
    let r = evaluate(model, test, &opts)?;
    Ok((r.apa, r.mae))
}

/// Goal accuracy per prefix fraction.
pub fn goal_eval(model: &Model, test: &[Ctas], prefixes: &[f64]) -> Result<BTreeMap<String, f64>, ModelError> {
    let opts = EvalOptions { prefixes: prefixes.to_vec(), ..EvalOptions::default() };
    Ok(evaluate(model, test, &opts)?.gpa_at)
}

/// `(apa, mae, cl)` of goal-conditioned generation from each true first action.
pub fn generation_eval(model: &Model, test: &[Ctas], gen: GenEvalOptions) -> Result<(f64, f64, f64), ModelError> {
    let opts = EvalOptions { prefixes: vec![], generation: Some(gen), ..EvalOptions::default() };
    let r = evaluate(model, test, &opts)?;
    Ok((r.gen_apa.unwrap_or(0.0), r.gen_mae.unwrap_or(0.0), r.cl.unwrap_or(0.0)))
}

/// Values swept per axis; an empty axis keeps the base configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub d_model: Vec<usize>,
    pub num_clusters: Vec<usize>,
    pub gamma: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub d_model: usize,
    pub num_clusters: usize,
    pub gamma: f64,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

impl SweepGrid {
    pub fn points(&self, base_model: &ModelConfig, base_train: &TrainConfig) -> Vec<(usize, usize, f64)> {
        let or = |v: &[usize], d: usize| if v.is_empty() { vec![d] } else { v.to_vec() };
        let gammas = if self.gamma.is_empty() { vec![base_train.gamma] } else { self.gamma.clone() };
        let mut out = Vec::new();
        for d in or(&self.d_model, base_model.encoder.d_model) {
            for m in or(&self.num_clusters, base_model.num_clusters) {
                for g in &gammas {
                    out.push((d, m, *g));
                }
            }
        }
        out
    }
}

/// Trains and evaluates one model per grid point with the shared seed.
/// Failures are recorded in the row and the sweep moves on.
pub fn sensitivity_sweep(
    train_raw: &[Ctas],
    test: &[Ctas],
    vocab: &Vocab,
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    grid: &SweepGrid,
    prefixes: &[f64],
) -> Vec<SweepRow> {
    grid.points(base_model, base_train)
        .into_iter()
        .map(|(d, m, g)| {
            let mut mc = base_model.clone();
            mc.encoder.d_model = d;
            mc.num_clusters = m;
            let tc = TrainConfig { gamma: g, ..base_train.clone() };
            let run = || -> Result<EvalReport, TrainError> {
                let (trainer, _) = training::train(train_raw, vocab.clone(), &mc, &tc, None)?;
                let opts = EvalOptions { prefixes: prefixes.to_vec(), seed: tc.seed, ..EvalOptions::default() };
                Ok(evaluate(&trainer.model, test, &opts)?)
            };
            match run() {
                Ok(report) => SweepRow { d_model: d, num_clusters: m, gamma: g, report: Some(report), error: None },
                Err(e) => {
                    log::warn!("sweep point d={d} m={m} gamma={g} failed: {e}");
                    SweepRow { d_model: d, num_clusters: m, gamma: g, report: None, error: Some(e.to_string()) }
                }
            }
        })
        .collect()
}

/// CSV with a header row; failed points leave metric cells empty.
pub fn sweep_csv(rows: &[SweepRow], prefixes: &[f64]) -> String {
    let mut out = String::from("d_model,num_clusters,gamma,apa,mae");
    for f in prefixes {
        let _ = write!(out, ",gpa_{}", prefix_key(*f));
    }
    out.push_str(",error\n");
    for r in rows {
        let _ = write!(out, "{},{},{}", r.d_model, r.num_clusters, r.gamma);
        match &r.report {
            Some(rep) => {
                let _ = write!(out, ",{},{}", rep.apa, rep.mae);
                for f in prefixes {
                    let v = rep.gpa_at.get(&prefix_key(*f)).copied().unwrap_or(0.0);
                    let _ = write!(out, ",{v}");
                }
                out.push_str(",\n");
            }
            None => {
                out.push_str(",,");
                for _ in prefixes {
                    out.push(',');
                }
                let msg = r.error.clone().unwrap_or_default().replace(['"', '\n'], " ");
                let _ = writeln!(out, ",\"{msg}\"");
            }
        }
    }
    out
}
