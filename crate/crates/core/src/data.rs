//! Sequence schema, JSONL corpus I/O, per-goal splitting, end-of-sequence
//! augmentation, duration clustering and the random-deletion transform.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reserved name of the end-of-sequence mark.
pub const EOS_NAME: &str = "<EOS>";
pub const VOCAB_VERSION: u32 = 1;
pub const CLUSTER_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("sequence {id}: time at index {index} does not increase (line {line})")]
    NonMonotone { id: String, index: usize, line: usize },
    #[error("sequence {id}: {message}")]
    Invalid { id: String, message: String },
    #[error("goals with fewer than 2 sequences: {0:?}")]
    SingletonGoals(Vec<String>),
    #[error("train fraction {0} must lie strictly between 0 and 1")]
    TrainFraction(f64),
    #[error("deletion fraction {0} must lie in [0, 1)")]
    DeleteFraction(f64),
    #[error("eos gap {0} must be positive")]
    EosGap(f64),
    #[error("sequence {0} already ends with the end-of-sequence mark")]
    AlreadyTerminated(String),
    #[error("requested {requested} clusters but only {available} distinct marks exist")]
    TooManyClusters { requested: usize, available: usize },
    #[error("unknown mark {0}")]
    UnknownMark(String),
    #[error("unknown goal {0}")]
    UnknownGoal(String),
    #[error("{0}")]
    Format(String),
}

/// One action: a mark id and its start time in seconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Action {
    pub mark: usize,
    pub time: f64,
}

impl Action {
    pub fn new(mark: usize, time: f64) -> Self {
        Self { mark, time }
    }
}

/// A goal-labelled continuous-time action sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Ctas {
    pub id: String,
    pub goal: usize,
    pub actions: Vec<Action>,
}

impl Ctas {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Gap before action `i`; the first action is measured from time zero.
    pub fn gap(&self, i: usize) -> f64 {
        if i == 0 {
            self.actions[0].time
        } else {
            self.actions[i].time - self.actions[i - 1].time
        }
    }

    pub fn marks(&self) -> Vec<usize> {
        self.actions.iter().map(|a| a.mark).collect()
    }

    pub fn ends_with(&self, mark: usize) -> bool {
        self.actions.last().is_some_and(|a| a.mark == mark)
    }

    /// Checks non-emptiness, strictly increasing finite non-negative times
    /// and id bounds.
    pub fn validate(&self, mark_bound: usize, goal_bound: usize) -> Result<(), DataError> {
        let invalid = |message: String| DataError::Invalid { id: self.id.clone(), message };
        if self.actions.is_empty() {
            return Err(invalid("no actions".into()));
        }
        if self.goal >= goal_bound {
            return Err(invalid(format!("goal id {} out of range", self.goal)));
        }
        for (i, a) in self.actions.iter().enumerate() {
            if a.mark >= mark_bound {
                return Err(invalid(format!("mark id {} out of range at index {i}", a.mark)));
            }
            if !a.time.is_finite() || a.time < 0.0 {
                return Err(invalid(format!("bad time {} at index {i}", a.time)));
            }
            if i > 0 && a.time <= self.actions[i - 1].time {
                return Err(DataError::NonMonotone { id: self.id.clone(), index: i, line: 0 });
            }
        }
        Ok(())
    }
}

/// Mark and goal names with their ids, plus the per-goal action sets.
///
/// Mark ids run `0..num_marks()`; the end-of-sequence mark takes id
/// `num_marks()`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocab {
    version: u32,
    marks: Vec<String>,
    goals: Vec<String>,
    /// Marks observed in training sequences of each goal.
    goal_actions: Vec<BTreeSet<usize>>,
}

impl Vocab {
    pub fn new() -> Self {
        Self { version: VOCAB_VERSION, ..Self::default() }
    }

    pub fn from_names(marks: &[&str], goals: &[&str]) -> Self {
        let mut v = Self::new();
        for m in marks {
            v.intern_mark(m).expect("valid mark name");
        }
        for g in goals {
            v.intern_goal(g);
        }
        v
    }

    fn intern_mark(&mut self, name: &str) -> Result<usize, DataError> {
        if name == EOS_NAME {
            return Err(DataError::Format(format!("{EOS_NAME} is reserved")));
        }
        if let Some(i) = self.marks.iter().position(|m| m == name) {
            return Ok(i);
        }
        self.marks.push(name.to_string());
        Ok(self.marks.len() - 1)
    }

    fn intern_goal(&mut self, name: &str) -> usize {
        if let Some(i) = self.goals.iter().position(|g| g == name) {
            return i;
        }
        self.goals.push(name.to_string());
        self.goal_actions.push(BTreeSet::new());
        self.goals.len() - 1
    }

    /// Number of real marks, excluding the end-of-sequence mark.
    pub fn num_marks(&self) -> usize {
        self.marks.len()
    }

    pub fn num_goals(&self) -> usize {
        self.goals.len()
    }

    pub fn eos(&self) -> usize {
        self.marks.len()
    }

    pub fn mark_id(&self, name: &str) -> Result<usize, DataError> {
        if name == EOS_NAME {
            return Ok(self.eos());
        }
        self.marks
            .iter()
            .position(|m| m == name)
            .ok_or_else(|| DataError::UnknownMark(name.to_string()))
    }

    pub fn goal_id(&self, name: &str) -> Result<usize, DataError> {
        self.goals
            .iter()
            .position(|g| g == name)
            .ok_or_else(|| DataError::UnknownGoal(name.to_string()))
    }

    pub fn mark_name(&self, id: usize) -> &str {
        if id == self.eos() {
            EOS_NAME
        } else {
            &self.marks[id]
        }
    }

    pub fn goal_name(&self, id: usize) -> &str {
        &self.goals[id]
    }

    /// Records the marks each goal uses in `train`; EOS is never included.
    pub fn set_goal_actions(&mut self, train: &[Ctas]) {
        self.goal_actions = vec![BTreeSet::new(); self.goals.len()];
        for seq in train {
            for a in &seq.actions {
                if a.mark < self.num_marks() {
                    self.goal_actions[seq.goal].insert(a.mark);
                }
            }
        }
    }

    pub fn goal_actions(&self, goal: usize) -> Result<&BTreeSet<usize>, DataError> {
        match self.goal_actions.get(goal) {
            Some(set) if !set.is_empty() => Ok(set),
            _ => Err(DataError::UnknownGoal(format!("goal {goal} has no training actions"))),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("vocab serialization")
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let v: Self = serde_json::from_str(text).map_err(|e| DataError::Format(e.to_string()))?;
        if v.version != VOCAB_VERSION {
            return Err(DataError::Format(format!("unsupported vocab version {}", v.version)));
        }
        Ok(v)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ActionRecord {
    mark: String,
    t: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CtasRecord {
    id: String,
    goal: String,
    actions: Vec<ActionRecord>,
}

fn parse_records(path: &Path) -> Result<Vec<(usize, CtasRecord)>, DataError> {
    let io = |source| DataError::Io { path: path.display().to_string(), source };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CtasRecord = serde_json::from_str(&line)
            .map_err(|e| DataError::Parse { line: i + 1, message: e.to_string() })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

fn record_to_ctas(
    line: usize,
    rec: CtasRecord,
    mut mark_of: impl FnMut(&str) -> Result<usize, DataError>,
    goal: usize,
) -> Result<Ctas, DataError> {
    let mut actions = Vec::with_capacity(rec.actions.len());
    for a in &rec.actions {
        let mark = mark_of(&a.mark).map_err(|e| DataError::Parse { line, message: e.to_string() })?;
        actions.push(Action::new(mark, a.t));
    }
    let seq = Ctas { id: rec.id, goal, actions };
    match seq.validate(usize::MAX, usize::MAX) {
        Err(DataError::NonMonotone { id, index, .. }) => Err(DataError::NonMonotone { id, index, line }),
        Err(e) => Err(DataError::Parse { line, message: e.to_string() }),
        Ok(()) => Ok(seq),
    }
}

/// Loads a corpus, assigning mark and goal ids by first appearance.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<(Vec<Ctas>, Vocab), DataError> {
    let mut vocab = Vocab::new();
    let mut corpus = Vec::new();
    for (line, rec) in parse_records(path.as_ref())? {
        let goal = vocab.intern_goal(&rec.goal);
        let seq = record_to_ctas(line, rec, |m| vocab.intern_mark(m), goal)?;
        corpus.push(seq);
    }
    check_unique_ids(&corpus)?;
    log::info!(
        "loaded {} sequences, {} marks, {} goals from {}",
        corpus.len(),
        vocab.num_marks(),
        vocab.num_goals(),
        path.as_ref().display()
    );
    Ok((corpus, vocab))
}

/// Loads a corpus against a fixed vocabulary; unseen names are errors.
pub fn load_corpus_with_vocab(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Vec<Ctas>, DataError> {
    let mut corpus = Vec::new();
    for (line, rec) in parse_records(path.as_ref())? {
        let goal = vocab
            .goal_id(&rec.goal)
            .map_err(|e| DataError::Parse { line, message: e.to_string() })?;
        let seq = record_to_ctas(
            line,
            rec,
            |m| match vocab.mark_id(m)? {
                id if id == vocab.eos() => Err(DataError::Format(format!("{EOS_NAME} is reserved"))),
                id => Ok(id),
            },
            goal,
        )?;
        corpus.push(seq);
    }
    check_unique_ids(&corpus)?;
    Ok(corpus)
}

fn check_unique_ids(corpus: &[Ctas]) -> Result<(), DataError> {
    let mut seen = BTreeSet::new();
    for seq in corpus {
        if !seen.insert(seq.id.as_str()) {
            return Err(DataError::Invalid { id: seq.id.clone(), message: "duplicate id".into() });
        }
    }
    Ok(())
}

/// Writes one JSON object per line.
pub fn write_corpus(path: impl AsRef<Path>, corpus: &[Ctas], vocab: &Vocab) -> Result<(), DataError> {
    let path = path.as_ref();
    let io = |source| DataError::Io { path: path.display().to_string(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for line in corpus_lines(corpus, vocab) {
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn corpus_lines<'a>(corpus: &'a [Ctas], vocab: &'a Vocab) -> impl Iterator<Item = String> + 'a {
    corpus.iter().map(move |seq| {
        let rec = CtasRecord {
            id: seq.id.clone(),
            goal: vocab.goal_name(seq.goal).to_string(),
            actions: seq
                .actions
                .iter()
                .map(|a| ActionRecord { mark: vocab.mark_name(a.mark).to_string(), t: a.time })
                .collect(),
        };
        serde_json::to_string(&rec).expect("record serialization")
    })
}

/// Per goal, shuffles the sequences with `seed` and puts the first
/// `⌈fraction·n⌉` (at most `n − 1`) into the training side.
pub fn split_by_goal(
    corpus: &[Ctas],
    train_fraction: f64,
    seed: u64,
    vocab: &Vocab,
) -> Result<(Vec<Ctas>, Vec<Ctas>), DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::TrainFraction(train_fraction));
    }
    let mut by_goal: BTreeMap<usize, Vec<&Ctas>> = BTreeMap::new();
    for seq in corpus {
        by_goal.entry(seq.goal).or_default().push(seq);
    }
    let singletons: Vec<String> = by_goal
        .iter()
        .filter(|(_, seqs)| seqs.len() < 2)
        .map(|(g, _)| vocab.goal_name(*g).to_string())
        .collect();
    if !singletons.is_empty() {
        return Err(DataError::SingletonGoals(singletons));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (_, mut seqs) in by_goal {
        seqs.shuffle(&mut rng);
        let n = seqs.len();
        let k = ((train_fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n - 1);
        train.extend(seqs[..k].iter().map(|s| (*s).clone()));
        test.extend(seqs[k..].iter().map(|s| (*s).clone()));
    }
    Ok((train, test))
}

/// Appends an end-of-sequence action `eos_gap` seconds after the last action.
pub fn append_eos(seq: &Ctas, eos: usize, eos_gap: f64) -> Result<Ctas, DataError> {
    if !(eos_gap > 0.0 && eos_gap.is_finite()) {
        return Err(DataError::EosGap(eos_gap));
    }
    let last = seq
        .actions
        .last()
        .ok_or_else(|| DataError::Invalid { id: seq.id.clone(), message: "no actions".into() })?;
    if last.mark == eos {
        return Err(DataError::AlreadyTerminated(seq.id.clone()));
    }
    let mut out = seq.clone();
    out.actions.push(Action::new(eos, last.time + eos_gap));
    Ok(out)
}

/// Median inter-action gap over all transitions of `corpus`.
pub fn median_gap(corpus: &[Ctas]) -> Option<f64> {
    let mut gaps: Vec<f64> = corpus
        .iter()
        .flat_map(|s| s.actions.windows(2).map(|w| w[1].time - w[0].time))
        .collect();
    if gaps.is_empty() {
        return None;
    }
    gaps.sort_by(f64::total_cmp);
    let n = gaps.len();
    Some(if n % 2 == 1 { gaps[n / 2] } else { 0.5 * (gaps[n / 2 - 1] + gaps[n / 2]) })
}

/// Mark → duration cluster assignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterMap {
    version: u32,
    num_clusters: usize,
    /// Cluster per mark id, EOS last.
    assignment: Vec<usize>,
    /// Mean gap to the next action per real mark.
    mean_gap: Vec<f64>,
    centroids: Vec<f64>,
}

impl ClusterMap {
    /// Every mark, EOS included, in cluster 0.
    pub fn single(num_marks: usize) -> Self {
        Self {
            version: CLUSTER_VERSION,
            num_clusters: 1,
            assignment: vec![0; num_marks + 1],
            mean_gap: vec![0.0; num_marks],
            centroids: vec![0.0],
        }
    }

    pub fn from_assignment(num_clusters: usize, assignment: Vec<usize>) -> Self {
        let n = assignment.len().saturating_sub(1);
        Self {
            version: CLUSTER_VERSION,
            num_clusters,
            assignment,
            mean_gap: vec![0.0; n],
            centroids: vec![0.0; num_clusters],
        }
    }

    pub fn num_clusters(&self) -> usize {
        self.num_clusters
    }

    pub fn cluster_of(&self, mark: usize) -> Option<usize> {
        self.assignment.get(mark).copied()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn mean_gap(&self) -> &[f64] {
        &self.mean_gap
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("cluster serialization")
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let c: Self = serde_json::from_str(text).map_err(|e| DataError::Format(e.to_string()))?;
        if c.version != CLUSTER_VERSION {
            return Err(DataError::Format(format!("unsupported cluster map version {}", c.version)));
        }
        Ok(c)
    }
}

/// One-dimensional k-means with k-means++ seeding.
///
/// Returns centroids sorted ascending and the cluster of each value, so
/// cluster ids are ordered by duration.
pub fn kmeans_1d(values: &[f64], k: usize, seed: u64, iterations: usize) -> (Vec<f64>, Vec<usize>) {
    assert!(k >= 1 && k <= values.len(), "k must lie in 1..=values.len()");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![values[rng.random_range(0..values.len())]];
    while centroids.len() < k {
        let d2: Vec<f64> = values
            .iter()
            .map(|v| centroids.iter().map(|c| (v - c) * (v - c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = values.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..values.len())
        };
        centroids.push(values[pick]);
    }

    let nearest = |centroids: &[f64], v: f64| {
        let mut best = 0;
        for (j, c) in centroids.iter().enumerate() {
            if (v - c).abs() < (v - centroids[best]).abs() {
                best = j;
            }
        }
        best
    };
    let mut assign: Vec<usize> = values.iter().map(|v| nearest(&centroids, *v)).collect();
    for _ in 0..iterations {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (v, a) in values.iter().zip(&assign) {
            sums[*a] += v;
            counts[*a] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j] / counts[j] as f64;
            }
        }
        let next: Vec<usize> = values.iter().map(|v| nearest(&centroids, *v)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|a, b| centroids[*a].total_cmp(&centroids[*b]).then(a.cmp(b)));
    let mut relabel = vec![0; k];
    for (new, old) in order.iter().enumerate() {
        relabel[*old] = new;
    }
    let sorted = order.iter().map(|j| centroids[*j]).collect();
    (sorted, assign.into_iter().map(|a| relabel[a]).collect())
}

/// Clusters marks by their mean gap to the following action in `train`.
///
/// Final actions and transitions into EOS carry no gap evidence. A mark never
/// followed by another action gets the corpus-wide mean gap. EOS joins the
/// cluster of the most frequent training mark.
pub fn build_clusters(
    train: &[Ctas],
    vocab: &Vocab,
    num_clusters: usize,
    seed: u64,
) -> Result<ClusterMap, DataError> {
    let n = vocab.num_marks();
    if num_clusters == 0 || num_clusters > n {
        return Err(DataError::TooManyClusters { requested: num_clusters, available: n });
    }
    let mut sums = vec![0.0; n];
    let mut counts = vec![0usize; n];
    let mut freq = vec![0usize; n];
    for seq in train {
        for a in &seq.actions {
            if a.mark < n {
                freq[a.mark] += 1;
            }
        }
        for w in seq.actions.windows(2) {
            if w[0].mark < n && w[1].mark < n {
                sums[w[0].mark] += w[1].time - w[0].time;
                counts[w[0].mark] += 1;
            }
        }
    }
    let total_count: usize = counts.iter().sum();
    let global = if total_count > 0 { sums.iter().sum::<f64>() / total_count as f64 } else { 1.0 };
    let mean_gap: Vec<f64> = (0..n)
        .map(|m| {
            if counts[m] > 0 {
                sums[m] / counts[m] as f64
            } else {
                log::warn!("mark {} has no following action; using global mean gap", vocab.mark_name(m));
                global
            }
        })
        .collect();
    let (centroids, mut assignment) = kmeans_1d(&mean_gap, num_clusters, seed, 100);
    let most_frequent = (0..n).max_by(|a, b| freq[*a].cmp(&freq[*b]).then(b.cmp(a))).unwrap_or(0);
    assignment.push(assignment[most_frequent]);
    Ok(ClusterMap { version: CLUSTER_VERSION, num_clusters, assignment, mean_gap, centroids })
}

/// Removes `⌊fraction·n⌋` uniformly chosen actions from each sequence,
/// never the first. Sequences left with fewer than two actions are dropped.
pub fn delete_random(corpus: &[Ctas], fraction: f64, seed: u64) -> Result<Vec<Ctas>, DataError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(DataError::DeleteFraction(fraction));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(corpus.len());
    for seq in corpus {
        let n = seq.len();
        let remove = (fraction * n as f64).floor() as usize;
        let doomed: HashMap<usize, ()> = if n > 1 && remove > 0 {
            rand::seq::index::sample(&mut rng, n - 1, remove.min(n - 1))
                .into_iter()
                .map(|i| (i + 1, ()))
                .collect()
        } else {
            HashMap::new()
        };
        let actions: Vec<Action> = seq
            .actions
            .iter()
            .enumerate()
            .filter(|(i, _)| !doomed.contains_key(i))
            .map(|(_, a)| *a)
            .collect();
        if actions.len() < 2 {
            log::warn!("sequence {} dropped after deletion ({} actions left)", seq.id, actions.len());
            continue;
        }
        out.push(Ctas { id: seq.id.clone(), goal: seq.goal, actions });
    }
    Ok(out)
}
