//! Synthetic corpora with known lognormal gap parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Action, Ctas, Vocab};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    Invalid(String),
    #[error("cannot read synth spec: {0}")]
    Parse(String),
}

/// Gap distribution of the interval that follows an action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionSpec {
    pub name: String,
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoalSpec {
    pub name: String,
    pub template: Vec<String>,
    /// Template position pairs exchanged with probability `swap_prob`.
    #[serde(default)]
    pub swaps: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub goals: Vec<GoalSpec>,
    pub actions: Vec<ActionSpec>,
    pub swap_prob: f64,
    pub num_sequences: usize,
    pub seed: u64,
    /// Range of the first action's start time.
    #[serde(default = "default_offset")]
    pub start_offset: (f64, f64),
}

fn default_offset() -> (f64, f64) {
    (0.1, 1.0)
}

impl SynthSpec {
    /// Two goals over disjoint mark sets; marks `b`/`e` are slow (median gap 8 s),
    /// the rest fast (median gap 1 s).
    pub fn two_goal_demo(num_sequences: usize, seed: u64) -> Self {
        let fast = 0.0;
        let slow = 8f64.ln();
        let action = |name: &str, mu: f64| ActionSpec { name: name.into(), mu, sigma: 0.25 };
        let goal = |name: &str, template: &[&str], swaps: Vec<(usize, usize)>| GoalSpec {
            name: name.into(),
            template: template.iter().map(|s| s.to_string()).collect(),
            swaps,
        };
        Self {
            goals: vec![
                goal("assemble", &["a0", "a1", "a2", "a0", "a1"], vec![(3, 4)]),
                goal("repair", &["b0", "b2", "b1", "b0", "b1", "b2"], vec![(1, 2)]),
            ],
            actions: vec![
                action("a0", fast),
                action("a1", fast),
                action("a2", slow),
                action("b0", fast),
                action("b1", fast),
                action("b2", slow),
            ],
            swap_prob: 0.05,
            num_sequences,
            seed,
            start_offset: default_offset(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, SynthError> {
        let spec: Self = serde_json::from_str(text).map_err(|e| SynthError::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Invalid(m));
        if self.goals.is_empty() {
            return bad("at least one goal is required".into());
        }
        if self.num_sequences == 0 {
            return bad("num_sequences must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.swap_prob) {
            return bad(format!("swap_prob {} outside [0, 1]", self.swap_prob));
        }
        let (lo, hi) = self.start_offset;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad(format!("start_offset ({lo}, {hi}) must satisfy 0 < lo <= hi"));
        }
        for (i, a) in self.actions.iter().enumerate() {
            if !a.mu.is_finite() || !a.sigma.is_finite() || a.sigma <= 0.0 {
                return bad(format!("action {} needs finite mu and sigma > 0", a.name));
            }
            if self.actions[..i].iter().any(|b| b.name == a.name) {
                return bad(format!("duplicate action {}", a.name));
            }
        }
        for g in &self.goals {
            if g.template.is_empty() {
                return bad(format!("goal {} has an empty template", g.name));
            }
            if let Some(m) = g.template.iter().find(|m| self.action_index(m).is_none()) {
                return bad(format!("goal {} uses undeclared action {m}", g.name));
            }
            if let Some((a, b)) = g.swaps.iter().find(|(a, b)| *a >= g.template.len() || *b >= g.template.len()) {
                return bad(format!("goal {} swap ({a}, {b}) out of template range", g.name));
            }
        }
        Ok(())
    }

    fn action_index(&self, name: &str) -> Option<usize> {
        self.actions.iter().position(|a| a.name == name)
    }

    /// Ground-truth median of the gap following `mark`.
    pub fn median_gap(&self, mark: &str) -> Option<f64> {
        self.action_index(mark).map(|i| self.actions[i].mu.exp())
    }

    pub fn vocab(&self) -> Vocab {
        let marks: Vec<&str> = self.actions.iter().map(|a| a.name.as_str()).collect();
        let goals: Vec<&str> = self.goals.iter().map(|g| g.name.as_str()).collect();
        Vocab::from_names(&marks, &goals)
    }
}

/// Draws `spec.num_sequences` sequences; sequence `i` uses its own stream of
/// the seeded generator, so output does not depend on thread count.
pub fn generate(spec: &SynthSpec) -> Result<(Vec<Ctas>, Vocab), SynthError> {
    spec.validate()?;
    let vocab = spec.vocab();
    let gaps: Vec<LogNormal<f64>> = spec
        .actions
        .iter()
        .map(|a| LogNormal::new(a.mu, a.sigma).map_err(|e| SynthError::Invalid(e.to_string())))
        .collect::<Result<_, _>>()?;
    let templates: Vec<Vec<usize>> = spec
        .goals
        .iter()
        .map(|g| g.template.iter().map(|m| spec.action_index(m).expect("validated")).collect())
        .collect();

    let corpus = (0..spec.num_sequences)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let goal = rng.random_range(0..spec.goals.len());
            let mut marks = templates[goal].clone();
            for &(a, b) in &spec.goals[goal].swaps {
                if rng.random_bool(spec.swap_prob) {
                    marks.swap(a, b);
                }
            }
            let (lo, hi) = spec.start_offset;
            let mut t = if hi > lo { rng.random_range(lo..hi) } else { lo };
            let mut actions = Vec::with_capacity(marks.len());
            for (k, &m) in marks.iter().enumerate() {
                if k > 0 {
                    t += gaps[marks[k - 1]].sample(&mut rng);
                }
                actions.push(Action::new(m, t));
            }
            Ctas { id: format!("syn{i:06}"), goal, actions }
        })
        .collect();
    Ok((corpus, vocab))
}
