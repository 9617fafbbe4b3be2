//! Goal-conditioned autoregressive sequence generation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Action, Ctas, DataError};
use crate::model::{Model, ModelError};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Sample marks and gaps.
    #[default]
    Stochastic,
    /// Most probable mark and median gap.
    Greedy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GoalMismatch,
    EosSampled,
    MaxLen,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenRequest {
    pub goal: usize,
    pub first: Action,
    /// Upper bound on generated actions, EOS excluded.
    pub max_len: usize,
    pub seed: u64,
    pub mode: SampleMode,
    /// Gap before the EOS closing a goal mismatch.
    pub eos_gap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    /// Generated actions, ending in EOS unless the length bound stopped the loop.
    pub sequence: Ctas,
    pub reason: Termination,
}

impl Generated {
    /// Actions before any trailing EOS.
    pub fn actions(&self, eos: usize) -> &[Action] {
        let a = &self.sequence.actions;
        if self.sequence.ends_with(eos) {
            &a[..a.len() - 1]
        } else {
            a
        }
    }
}

/// Extends `request.first` one action at a time until the most probable goal
/// differs from the requested one, EOS is drawn, or `max_len` actions exist.
///
/// The goal is checked on the first action and again after every appended
/// action; a mismatch keeps the offending action and closes with EOS.
pub fn generate(model: &Model, request: &GenRequest, id: impl Into<String>) -> Result<Generated, ModelError> {
    let eos = model.vocab.eos();
    if request.goal >= model.vocab.num_goals() {
        return Err(DataError::UnknownGoal(format!("id {}", request.goal)).into());
    }
    if request.first.mark >= model.vocab.num_marks() {
        return Err(DataError::UnknownMark(format!("id {}", request.first.mark)).into());
    }
    if !(request.first.time >= 0.0 && request.first.time.is_finite()) {
        return Err(ModelError::Config(format!("first action time {} must be non-negative", request.first.time)));
    }
    if request.max_len < 2 || request.max_len > model.max_len() {
        return Err(ModelError::Config(format!(
            "max_len {} must lie in 2..={}",
            request.max_len,
            model.max_len()
        )));
    }
    if !(request.eos_gap > 0.0) {
        return Err(ModelError::Config(format!("eos_gap {} must be positive", request.eos_gap)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
    let mut actions = vec![request.first];
    let reason = loop {
        let pred = model.predict(&actions)?.pop().expect("non-empty prefix");
        let last = *actions.last().expect("non-empty prefix");
        if pred.goal.argmax() != request.goal {
            actions.push(Action::new(eos, last.time + request.eos_gap));
            break Termination::GoalMismatch;
        }
        if actions.len() >= request.max_len {
            break Termination::MaxLen;
        }
        let (mark, gap) = match request.mode {
            SampleMode::Stochastic => {
                let mark = pred.mark.sample(&mut rng);
                (mark, pred.time.sample(&mut rng))
            }
            SampleMode::Greedy => (pred.mark.argmax(), pred.time.point()),
        };
        // guard against a gap that vanishes in floating point
        let time = (last.time + gap).max(next_up(last.time));
        actions.push(Action::new(mark, time));
        if mark == eos {
            break Termination::EosSampled;
        }
    };
    Ok(Generated { sequence: Ctas { id: id.into(), goal: request.goal, actions }, reason })
}

fn next_up(x: f64) -> f64 {
    if x == 0.0 {
        f64::from_bits(1)
    } else {
        f64::from_bits(x.to_bits() + 1)
    }
}
