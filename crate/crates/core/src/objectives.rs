//! Training losses: mark/time likelihood, discounted goal cross-entropy,
//! goal and action margin hinges, L2 and their weighted total.

use serde::{Deserialize, Serialize};

use crate::data::Ctas;
use crate::encoder::Bound;
use crate::heads;
use crate::model::{Forward, Model, ModelError};
use crate::numerics::{GradStore, NumericError, ParamStore, Tape, Tensor, Var};

/// Loss weights shared by training and gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gamma: f64,
    pub margin_weight: f64,
    pub l2_coeff: f64,
    /// Include the time term of the transition into EOS.
    pub eos_time_term: bool,
    /// Apply the margin hinges at all.
    pub margins: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { gamma: 0.9, margin_weight: 0.1, l2_coeff: 1e-3, eos_time_term: true, margins: true }
    }
}

/// Batch-mean loss components; `l2` is the already weighted penalty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll: f64,
    pub goal_ce: f64,
    pub margin_goal: f64,
    pub margin_action: f64,
    pub l2: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(nll: f64, goal_ce: f64, margin_goal: f64, margin_action: f64, l2: f64, w: &LossWeights) -> Self {
        let total = nll + goal_ce + w.margin_weight * (margin_goal + margin_action) + l2;
        Self { nll, goal_ce, margin_goal, margin_action, l2, total }
    }

    pub fn is_finite(&self) -> bool {
        [self.nll, self.goal_ce, self.margin_goal, self.margin_action, self.l2, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Scalar loss handles for one sequence.
#[derive(Clone, Copy, Debug)]
pub struct SequenceLoss {
    pub nll: Var,
    pub goal_ce: Var,
    pub margin_goal: Var,
    pub margin_action: Var,
}

/// Unweighted component values for one sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SequenceValues {
    pub nll: f64,
    pub goal_ce: f64,
    pub margin_goal: f64,
    pub margin_action: f64,
}

impl SequenceValues {
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        self.nll + self.goal_ce + w.margin_weight * (self.margin_goal + self.margin_action)
    }
}

fn zero(tape: &Tape) -> Result<Var, NumericError> {
    tape.constant(Tensor::scalar(0.0))
}

/// Negative log-likelihood of every transition after an encoded action.
///
/// `actions` is the full sequence; the first `encoded` actions were fed to
/// the encoder and each one followed by another action contributes a mark
/// term and (unless it leads into EOS with `eos_time_term` off) a time term.
pub fn nll(
    tape: &Tape,
    f: &Forward,
    seq: &Ctas,
    encoded: usize,
    eos: usize,
    eos_time_term: bool,
) -> Result<Var, NumericError> {
    let width = tape.shape(f.mark_logp)[1];
    let transitions: Vec<usize> = (0..encoded).filter(|k| k + 1 < seq.len()).collect();
    if transitions.is_empty() {
        return Err(NumericError::Contract(format!("sequence {} has no transition", seq.id)));
    }
    let flat: Vec<usize> = transitions.iter().map(|k| k * width + seq.actions[k + 1].mark).collect();
    let mark_ll = tape.sum(tape.pick(f.mark_logp, &flat)?)?;
    let timed: Vec<usize> = transitions
        .iter()
        .copied()
        .filter(|k| eos_time_term || seq.actions[k + 1].mark != eos)
        .collect();
    let ll = if timed.is_empty() {
        mark_ll
    } else {
        let mu = tape.pick(f.mu, &timed)?;
        let var = tape.pick(f.var, &timed)?;
        let deltas: Vec<f64> = timed.iter().map(|k| seq.actions[k + 1].time - seq.actions[*k].time).collect();
        let time_ll = tape.sum(heads::log_density_tape(tape, mu, var, &deltas)?)?;
        tape.add(mark_ll, time_ll)?
    };
    tape.scale(ll, -1.0)
}

/// `Σ_k γ^k · (−log p_k(goal))` with `k` counted from 1.
pub fn discounted_goal_ce(tape: &Tape, goal_logp: Var, goal: usize, gamma: f64) -> Result<Var, NumericError> {
    let shape = tape.shape(goal_logp);
    let (k, g) = (shape[0], shape[1]);
    let picked = tape.pick(goal_logp, &(0..k).map(|i| i * g + goal).collect::<Vec<_>>())?;
    let weights = tape.constant(Tensor::vector((1..=k).map(|i| gamma.powi(i as i32)).collect()))?;
    tape.scale(tape.sum(tape.mul(picked, weights)?)?, -1.0)
}

/// `Σ_k Σ_c max(0, p*_k(c) − p_k(c))` where `p*_k` is the running maximum of
/// earlier rows (zero at the first row) for each column in `cols`.
pub fn margin_hinge(tape: &Tape, probs: Var, cols: &[usize]) -> Result<Var, NumericError> {
    let shape = tape.shape(probs);
    let (k, w) = (shape[0], shape[1]);
    if k < 2 || cols.is_empty() {
        return zero(tape);
    }
    let row = |i: usize| tape.pick(probs, &cols.iter().map(|c| i * w + c).collect::<Vec<_>>());
    let mut best = row(0)?;
    let mut total: Option<Var> = None;
    for i in 1..k {
        let cur = row(i)?;
        let term = tape.sum(tape.relu(tape.sub(best, cur)?)?)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
        best = tape.maximum(best, cur)?;
    }
    Ok(total.expect("at least one term"))
}

pub fn margin_goal(tape: &Tape, goal_logp: Var, goal: usize) -> Result<Var, NumericError> {
    margin_hinge(tape, tape.exp(goal_logp)?, &[goal])
}

pub fn margin_action(tape: &Tape, mark_logp: Var, goal_actions: &[usize]) -> Result<Var, NumericError> {
    margin_hinge(tape, tape.exp(mark_logp)?, goal_actions)
}

/// Number of leading actions fed to the encoder: everything but a trailing EOS.
pub fn encoded_len(seq: &Ctas, eos: usize) -> usize {
    if seq.ends_with(eos) {
        seq.len() - 1
    } else {
        seq.len()
    }
}

/// Records all per-sequence losses.
pub fn sequence_losses(
    model: &Model,
    tape: &Tape,
    p: &Bound,
    seq: &Ctas,
    w: &LossWeights,
) -> Result<SequenceLoss, ModelError> {
    let eos = model.vocab.eos();
    if seq.len() < 2 {
        return Err(NumericError::Contract(format!("sequence {} needs at least two actions", seq.id)).into());
    }
    let n = encoded_len(seq, eos);
    let f = model.forward(tape, p, &seq.actions[..n])?;
    let nll = nll(tape, &f, seq, n, eos, w.eos_time_term)?;
    let goal_ce = discounted_goal_ce(tape, f.goal_logp, seq.goal, w.gamma)?;
    let (margin_goal, margin_action) = if w.margins {
        let actions: Vec<usize> = model.vocab.goal_actions(seq.goal)?.iter().copied().collect();
        (margin_goal(tape, f.goal_logp, seq.goal)?, margin_action(tape, f.mark_logp, &actions)?)
    } else {
        (zero(tape)?, zero(tape)?)
    };
    Ok(SequenceLoss { nll, goal_ce, margin_goal, margin_action })
}

/// `nll + goal_ce + margin_weight·(margin_goal + margin_action)` on the tape.
pub fn weighted(tape: &Tape, l: &SequenceLoss, w: &LossWeights) -> Result<Var, NumericError> {
    let margins = tape.scale(tape.add(l.margin_goal, l.margin_action)?, w.margin_weight)?;
    tape.add(tape.add(l.nll, l.goal_ce)?, margins)
}

fn values(tape: &Tape, l: &SequenceLoss) -> SequenceValues {
    SequenceValues {
        nll: tape.item(l.nll),
        goal_ce: tape.item(l.goal_ce),
        margin_goal: tape.item(l.margin_goal),
        margin_action: tape.item(l.margin_action),
    }
}

fn check_finite(v: &SequenceValues, id: &str) -> Result<(), ModelError> {
    for (component, x) in [
        ("nll", v.nll),
        ("goal_ce", v.goal_ce),
        ("margin_goal", v.margin_goal),
        ("margin_action", v.margin_action),
    ] {
        if !x.is_finite() {
            return Err(ModelError::NonFinite { component, sequence: id.to_string() });
        }
    }
    Ok(())
}

fn tag_nonfinite(e: ModelError, id: &str) -> ModelError {
    match e {
        ModelError::Numeric(NumericError::NonFinite { op }) => {
            ModelError::NonFinite { component: op, sequence: id.to_string() }
        }
        other => other,
    }
}

/// Component values of one sequence, without gradients.
pub fn sequence_values(model: &Model, seq: &Ctas, w: &LossWeights) -> Result<SequenceValues, ModelError> {
    let tape = Tape::new();
    let p = model.params.bind(&tape)?;
    let l = sequence_losses(model, &tape, &p, seq, w).map_err(|e| tag_nonfinite(e, &seq.id))?;
    let v = values(&tape, &l);
    check_finite(&v, &seq.id)?;
    Ok(v)
}

/// Component values of one sequence and the gradient of its weighted loss,
/// added into `grads`.
pub fn sequence_grad(
    model: &Model,
    seq: &Ctas,
    w: &LossWeights,
    grads: &mut GradStore,
) -> Result<SequenceValues, ModelError> {
    let tape = Tape::new();
    let p = model.params.bind(&tape)?;
    let l = sequence_losses(model, &tape, &p, seq, w).map_err(|e| tag_nonfinite(e, &seq.id))?;
    let v = values(&tape, &l);
    check_finite(&v, &seq.id)?;
    let total = weighted(&tape, &l, w)?;
    tape.backward(total, grads).map_err(|e| tag_nonfinite(e.into(), &seq.id))?;
    Ok(v)
}

/// `l2_coeff · ‖θ‖²`.
pub fn l2_penalty(params: &ParamStore, l2_coeff: f64) -> f64 {
    l2_coeff * params.squared_norm()
}

/// Averages per-sequence values over the batch and adds the L2 penalty once.
pub fn aggregate(values: &[SequenceValues], params: &ParamStore, w: &LossWeights) -> LossBreakdown {
    let n = values.len().max(1) as f64;
    let mean = |f: fn(&SequenceValues) -> f64| values.iter().map(f).sum::<f64>() / n;
    LossBreakdown::combine(
        mean(|v| v.nll),
        mean(|v| v.goal_ce),
        mean(|v| v.margin_goal),
        mean(|v| v.margin_action),
        l2_penalty(params, w.l2_coeff),
        w,
    )
}

/// Mean loss over `batch` plus the L2 penalty, recorded on `tape` with the
/// parameters bound as `p`.
pub fn total_loss(
    model: &Model,
    tape: &Tape,
    p: &Bound,
    batch: &[Ctas],
    w: &LossWeights,
) -> Result<Var, ModelError> {
    if batch.is_empty() {
        return Err(NumericError::Contract("empty batch".into()).into());
    }
    let mut acc: Option<Var> = None;
    for seq in batch {
        let l = sequence_losses(model, tape, p, seq, w)?;
        let v = weighted(tape, &l, w)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, v)?,
            None => v,
        });
    }
    let mean = tape.scale(acc.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
    let mut l2 = zero(tape)?;
    for v in p.values() {
        l2 = tape.add(l2, tape.sum(tape.mul(*v, *v)?)?)?;
    }
    Ok(tape.add(mean, tape.scale(l2, w.l2_coeff)?)?)
}

/// Mean loss breakdown over `corpus` at the current parameters.
pub fn evaluate_loss(model: &Model, corpus: &[Ctas], w: &LossWeights) -> Result<LossBreakdown, ModelError> {
    use rayon::prelude::*;
    let values = corpus
        .par_iter()
        .map(|s| sequence_values(model, s, w))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(aggregate(&values, &model.params, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{append_eos, Action, ClusterMap, Vocab};
    use crate::encoder::EncoderConfig;
    use crate::heads::TimeDensity;
    use crate::model::{Alphas, ModelConfig, Variant};
    use crate::numerics::{finite_difference_check, GradCheckOptions};

    fn model(variant: Variant) -> Model {
        let mut vocab = Vocab::from_names(&["a", "b", "c"], &["g0", "g1"]);
        vocab.set_goal_actions(&[
            Ctas { id: "t0".into(), goal: 0, actions: vec![Action::new(0, 1.0), Action::new(1, 2.0)] },
            Ctas { id: "t1".into(), goal: 1, actions: vec![Action::new(2, 1.0)] },
        ]);
        let clusters = ClusterMap::from_assignment(2, vec![0, 1, 1, 0]);
        let config = ModelConfig {
            encoder: EncoderConfig { d_model: 4, heads: 2, blocks: 1, max_len: 8, ..EncoderConfig::default() },
            num_clusters: 2,
            variant,
            alpha: Alphas::default(),
        };
        Model::init(config, vocab, clusters, 1.5, 5).unwrap()
    }

    fn five_action(eos: usize) -> Ctas {
        let raw = Ctas {
            id: "s".into(),
            goal: 0,
            actions: vec![
                Action::new(0, 0.4),
                Action::new(1, 1.1),
                Action::new(0, 2.0),
                Action::new(2, 2.3),
                Action::new(1, 3.9),
            ],
        };
        append_eos(&raw, eos, 0.8).unwrap()
    }

    #[test]
    fn nll_matches_per_term_oracle() {
        let m = model(Variant::Base);
        let seq = Ctas {
            id: "x".into(),
            goal: 0,
            actions: vec![Action::new(0, 0.5), Action::new(1, 1.0), Action::new(2, 2.5), Action::new(0, 4.0)],
        };
        let w = LossWeights::default();
        let v = sequence_values(&m, &seq, &w).unwrap();
        let preds = m.predict(&seq.actions).unwrap();
        let mut oracle = 0.0;
        for k in 0..3 {
            let next = seq.actions[k + 1];
            oracle -= preds[k].mark.0[next.mark].ln();
            oracle -= preds[k].time.log_density(next.time - seq.actions[k].time).unwrap();
        }
        assert!((v.nll - oracle).abs() < 1e-12, "{} vs {oracle}", v.nll);
    }

    #[test]
    fn single_transition_has_one_mark_and_one_time_term() {
        let m = model(Variant::Base);
        let seq = Ctas { id: "x".into(), goal: 1, actions: vec![Action::new(2, 0.5), Action::new(1, 2.0)] };
        let v = sequence_values(&m, &seq, &LossWeights::default()).unwrap();
        let p = &m.predict(&seq.actions[..1]).unwrap()[0];
        let expect = -p.mark.0[1].ln() - p.time.log_density(1.5).unwrap();
        assert!((v.nll - expect).abs() < 1e-12);
    }

    #[test]
    fn eos_transition_time_term_is_optional() {
        let m = model(Variant::Base);
        let seq = five_action(m.vocab.eos());
        let with = sequence_values(&m, &seq, &LossWeights::default()).unwrap();
        let without =
            sequence_values(&m, &seq, &LossWeights { eos_time_term: false, ..LossWeights::default() }).unwrap();
        let preds = m.predict(&seq.actions[..5]).unwrap();
        let eos_time = preds[4].time.log_density(0.8).unwrap();
        assert!((without.nll - eos_time - with.nll).abs() < 1e-12);
    }

    fn const_logp(tape: &Tape, rows: &[Vec<f64>]) -> Var {
        let logs: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect();
        tape.constant(Tensor::from_rows(&logs).unwrap()).unwrap()
    }

    #[test]
    fn discount_cases() {
        let tape = Tape::new();
        let lp = const_logp(&tape, &[vec![0.6, 0.4], vec![0.3, 0.7]]);
        let ce1 = -(0.6f64.ln());
        let ce2 = -(0.3f64.ln());
        let g1 = tape.item(discounted_goal_ce(&tape, lp, 0, 1.0).unwrap());
        assert!((g1 - (ce1 + ce2)).abs() < 1e-12);
        let g0 = tape.item(discounted_goal_ce(&tape, lp, 0, 0.0).unwrap());
        assert_eq!(g0, 0.0);
        let g9 = tape.item(discounted_goal_ce(&tape, lp, 0, 0.9).unwrap());
        assert!((g9 - (0.9 * ce1 + 0.81 * ce2)).abs() < 1e-12);
    }

    #[test]
    fn margin_goal_hand_cases() {
        let tape = Tape::new();
        let drop = const_logp(&tape, &[vec![0.7, 0.3], vec![0.5, 0.5]]);
        assert!((tape.item(margin_goal(&tape, drop, 0).unwrap()) - 0.2).abs() < 1e-12);
        let rising = const_logp(&tape, &[vec![0.2, 0.8], vec![0.5, 0.5], vec![0.9, 0.1]]);
        assert_eq!(tape.item(margin_goal(&tape, rising, 0).unwrap()), 0.0);
        let flat = const_logp(&tape, &[vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert_eq!(tape.item(margin_goal(&tape, flat, 0).unwrap()), 0.0);
        let single = const_logp(&tape, &[vec![0.9, 0.1]]);
        assert_eq!(tape.item(margin_goal(&tape, single, 1).unwrap()), 0.0);
    }

    #[test]
    fn margin_action_matches_nested_loop() {
        let rows = vec![vec![0.5, 0.2, 0.3], vec![0.3, 0.4, 0.3], vec![0.4, 0.1, 0.5]];
        let cols = [0usize, 1];
        let tape = Tape::new();
        let lp = const_logp(&tape, &rows);
        let got = tape.item(margin_action(&tape, lp, &cols).unwrap());
        let mut oracle = 0.0;
        for &c in &cols {
            let mut best = 0.0f64;
            for (k, r) in rows.iter().enumerate() {
                if k > 0 {
                    oracle += (best - r[c]).max(0.0);
                }
                best = best.max(r[c]);
            }
        }
        // col 0: 0.2 + 0.1; col 1: 0 + 0.3
        assert!((got - oracle).abs() < 1e-12);
        assert!((oracle - 0.6).abs() < 1e-12);
        let one = tape.item(margin_action(&tape, lp, &[0]).unwrap());
        let goal_like = tape.item(margin_goal(&tape, lp, 0).unwrap());
        assert_eq!(one, goal_like);
    }

    #[test]
    fn breakdown_identities() {
        let w = LossWeights::default();
        let b = LossBreakdown::combine(0.0, 0.0, 0.0, 0.0, 0.25, &w);
        assert_eq!(b.total, 0.25);
        let w0 = LossWeights { margin_weight: 0.0, ..w };
        let b = LossBreakdown::combine(1.0, 2.0, 5.0, 7.0, 0.5, &w0);
        assert_eq!(b.total, 3.5);
        let b = LossBreakdown::combine(1.0, 2.0, 5.0, 7.0, 0.5, &w);
        assert!((b.total - (1.0 + 2.0 + 0.1 * 12.0 + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn batch_loss_is_mean_plus_l2() {
        let m = model(Variant::Base);
        let w = LossWeights::default();
        let a = five_action(m.vocab.eos());
        let mut b = a.clone();
        b.goal = 1;
        b.actions[0].mark = 2;
        let va = sequence_values(&m, &a, &w).unwrap().weighted(&w);
        let vb = sequence_values(&m, &b, &w).unwrap().weighted(&w);
        let tape = Tape::new();
        let p = m.params.bind(&tape).unwrap();
        let t = tape.item(total_loss(&m, &tape, &p, &[a.clone(), b.clone()], &w).unwrap());
        let expect = 0.5 * (va + vb) + l2_penalty(&m.params, w.l2_coeff);
        assert!((t - expect).abs() < 1e-10);
        let agg = evaluate_loss(&m, &[a, b], &w).unwrap();
        assert!((agg.total - expect).abs() < 1e-10);
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        for variant in [Variant::Base, Variant::PlusPlus] {
            let m = model(variant);
            let seq = five_action(m.vocab.eos());
            let w = LossWeights::default();
            let report = finite_difference_check(
                |store, tape| {
                    let mm = Model { params: store.clone(), ..m.clone() };
                    let p = store.bind(tape)?;
                    total_loss(&mm, tape, &p, std::slice::from_ref(&seq), &w).map_err(|e| match e {
                        ModelError::Numeric(n) => n,
                        other => NumericError::Contract(other.to_string()),
                    })
                },
                &m.params,
                GradCheckOptions::default(),
            )
            .unwrap();
            assert!(report.passes(1e-4), "{variant:?}: {:?}", report.worst());
        }
    }

    #[test]
    fn unknown_goal_actions_error() {
        let mut m = model(Variant::Base);
        m.vocab.set_goal_actions(&[]);
        let seq = five_action(m.vocab.eos());
        assert!(sequence_values(&m, &seq, &LossWeights::default()).is_err());
        let ok = sequence_values(&m, &seq, &LossWeights { margins: false, ..LossWeights::default() });
        assert!(ok.is_ok());
    }

    #[test]
    fn log_density_integrates_to_one() {
        let d = TimeDensity::new(0.4, 0.6).unwrap();
        // substitution x = ln Δ turns the density into a normal in x
        let (a, b, n) = (0.4 - 12.0, 0.4 + 12.0, 200_000);
        let h = (b - a) / n as f64;
        let mut s = 0.0;
        for i in 0..=n {
            let x: f64 = a + i as f64 * h;
            let wgt = if i == 0 || i == n { 0.5 } else { 1.0 };
            s += wgt * d.density(x.exp()) * x.exp();
        }
        assert!((s * h - 1.0).abs() < 1e-9);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn monotone_scores_have_zero_margin(
                steps in prop::collection::vec(0.0f64..0.2, 1..12),
                start in 0.01f64..0.3,
            ) {
                let mut p = start;
                let rows: Vec<Vec<f64>> = std::iter::once(start)
                    .chain(steps.iter().map(|s| { p = (p + s).min(0.99); p }))
                    .map(|q| vec![q, 1.0 - q])
                    .collect();
                let tape = Tape::new();
                let lp = const_logp(&tape, &rows);
                let cols: Vec<usize> = vec![0];
                let mg = tape.item(margin_goal(&tape, lp, 0).unwrap());
                let ma = tape.item(margin_action(&tape, lp, &cols).unwrap());
                prop_assert_eq!(mg, 0.0);
                prop_assert_eq!(ma, 0.0);
            }
        }
    }
}
