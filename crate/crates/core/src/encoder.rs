//! Action embeddings, causal self-attention blocks and the order-free set
//! embedding.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Action;
use crate::numerics::{NumericError, ParamStore, Tape, Tensor, Var};

/// Parameter handles recorded on a tape, keyed by name.
pub type Bound = BTreeMap<String, Var>;

pub(crate) fn get(p: &Bound, name: &str) -> Result<Var, NumericError> {
    p.get(name).copied().ok_or_else(|| NumericError::Contract(format!("missing parameter {name}")))
}

/// Score written into masked (future) attention slots before the softmax.
const MASKED: f64 = -1e30;
pub const LN_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnMode {
    /// Transformed states are summed over every index up to the current one.
    #[default]
    Cumulative,
    /// Standard per-position feed-forward.
    Positionwise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Rows of the positional table; 0 sizes it from the training data.
    pub max_len: usize,
    pub ffn: FfnMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { d_model: 16, heads: 2, blocks: 2, max_len: 0, ffn: FfnMode::Cumulative }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.d_model == 0 || self.heads == 0 {
            return Err("d_model and heads must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// History embeddings `s_1..s_k` and, for the set variant, `x_1..x_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState {
    pub states: Tensor,
    pub set: Option<Tensor>,
}

impl EncoderState {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

pub(crate) fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect())
        .expect("shape matches count")
}

/// Registers embedding, positional and attention-block parameters.
pub fn init_params(
    store: &mut ParamStore,
    cfg: &EncoderConfig,
    num_marks: usize,
    rng: &mut impl Rng,
) -> Result<(), NumericError> {
    let d = cfg.d_model;
    let bound = 1.0 / (d as f64).sqrt();
    store.insert("enc.embed.mark", uniform(rng, &[num_marks, d], bound))?;
    store.insert("enc.embed.time", uniform(rng, &[2, d], bound))?;
    store.insert("enc.embed.bias", Tensor::zeros(&[d]))?;
    let normal = Normal::new(0.0, 0.02).expect("valid normal");
    let pos: Vec<f64> = (0..cfg.max_len * d).map(|_| normal.sample(rng)).collect();
    store.insert("enc.pos", Tensor::new(vec![cfg.max_len, d], pos)?)?;
    let inner_bound = 1.0 / ((4 * d) as f64).sqrt();
    for b in 0..cfg.blocks {
        let pre = format!("enc.block{b}");
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert(format!("{pre}.attn.{w}"), uniform(rng, &[d, d], bound))?;
        }
        for ln in ["ln1", "ln2"] {
            store.insert(format!("{pre}.{ln}.gain"), Tensor::filled(&[d], 1.0))?;
            store.insert(format!("{pre}.{ln}.bias"), Tensor::zeros(&[d]))?;
        }
        store.insert(format!("{pre}.ffn.w1"), uniform(rng, &[d, 4 * d], bound))?;
        store.insert(format!("{pre}.ffn.b1"), Tensor::zeros(&[4 * d]))?;
        store.insert(format!("{pre}.ffn.w2"), uniform(rng, &[4 * d, d], inner_bound))?;
        store.insert(format!("{pre}.ffn.b2"), Tensor::zeros(&[d]))?;
    }
    Ok(())
}

/// Registers the set-embedding network parameters.
pub fn init_set_params(store: &mut ParamStore, d: usize, rng: &mut impl Rng) -> Result<(), NumericError> {
    let bound = 1.0 / (d as f64).sqrt();
    for layer in ["in", "hidden", "out"] {
        store.insert(format!("set.{layer}.w"), uniform(rng, &[d, d], bound))?;
        store.insert(format!("set.{layer}.b"), Tensor::zeros(&[d]))?;
    }
    Ok(())
}

/// `[t_i, Δ_i] / time_scale` per action, with `t_0 = 0`.
pub fn time_features(actions: &[Action], time_scale: f64) -> Tensor {
    let mut v = Vec::with_capacity(actions.len() * 2);
    let mut prev = 0.0;
    for a in actions {
        v.push(a.time / time_scale);
        v.push((a.time - prev) / time_scale);
        prev = a.time;
    }
    Tensor::new(vec![actions.len(), 2], v).expect("two features per action")
}

/// Lower-triangular ones: left-multiplying sums rows `0..=i` into row `i`.
pub fn prefix_sum_matrix(k: usize) -> Tensor {
    let mut v = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..=i {
            v[i * k + j] = 1.0;
        }
    }
    Tensor::new(vec![k, k], v).expect("square")
}

fn linear(tape: &Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var, NumericError> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_bias(y, b),
        None => Ok(y),
    }
}

/// Input embeddings `y_i` (k×D) before positions are added.
pub fn embed(tape: &Tape, p: &Bound, actions: &[Action], time_scale: f64) -> Result<Var, NumericError> {
    if actions.is_empty() {
        return Err(NumericError::Contract("empty prefix".into()));
    }
    let marks: Vec<usize> = actions.iter().map(|a| a.mark).collect();
    let e = tape.gather_rows(get(p, "enc.embed.mark")?, &marks)?;
    let f = tape.constant(time_features(actions, time_scale))?;
    let t = tape.matmul(f, get(p, "enc.embed.time")?)?;
    let y = tape.add(e, t)?;
    tape.add_bias(y, get(p, "enc.embed.bias")?)
}

/// Adds positional rows `0..k`; prefixes longer than the table are rejected.
pub fn add_positions(tape: &Tape, p: &Bound, y: Var) -> Result<Var, NumericError> {
    let pos = get(p, "enc.pos")?;
    let k = tape.shape(y)[0];
    let max_len = tape.shape(pos)[0];
    if k > max_len {
        return Err(NumericError::Index { op: "positional table", index: k - 1, bound: max_len });
    }
    let idx: Vec<usize> = (0..k).collect();
    let rows = tape.gather_rows(pos, &idx)?;
    tape.add(y, rows)
}

/// Masked multi-head attention over projected `q`, `k`, `v` (each n×D).
///
/// Returns the concatenated head outputs (before mixing) and each head's
/// attention weight matrix.
pub fn causal_attention(
    tape: &Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>), NumericError> {
    let shape = tape.shape(q);
    let (n, d) = (shape[0], shape[1]);
    let dh = d / heads;
    let mask: Vec<bool> = (0..n * n).map(|idx| idx % n > idx / n).collect();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let scores = tape.scale(tape.matmul(qh, tape.transpose(kh)?)?, scale)?;
        let a = tape.softmax_rows(tape.masked_fill(scores, &mask, MASKED)?)?;
        outs.push(tape.matmul(a, vh)?);
        weights.push(a);
    }
    let out = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    Ok((out, weights))
}

/// Runs the attention blocks over positioned embeddings (k×D) and returns
/// `s_1..s_k` as the rows of a k×D matrix.
pub fn encode(tape: &Tape, p: &Bound, cfg: &EncoderConfig, h0: Var) -> Result<Var, NumericError> {
    let k = tape.shape(h0)[0];
    if k == 0 {
        return Err(NumericError::Contract("empty prefix".into()));
    }
    let prefix = match cfg.ffn {
        FfnMode::Cumulative => Some(tape.constant(prefix_sum_matrix(k))?),
        FfnMode::Positionwise => None,
    };
    let mut h = h0;
    for b in 0..cfg.blocks {
        let pre = format!("enc.block{b}");
        let w = |name: &str| get(p, &format!("{pre}.{name}"));
        let q = tape.matmul(h, w("attn.wq")?)?;
        let kk = tape.matmul(h, w("attn.wk")?)?;
        let v = tape.matmul(h, w("attn.wv")?)?;
        let (att, _) = causal_attention(tape, q, kk, v, cfg.heads)?;
        let mixed = tape.matmul(att, w("attn.wo")?)?;
        h = tape.layer_norm(tape.add(h, mixed)?, w("ln1.gain")?, w("ln1.bias")?, LN_EPS)?;

        let inner = tape.relu(linear(tape, h, w("ffn.w1")?, Some(w("ffn.b1")?))?)?;
        let mut f = linear(tape, inner, w("ffn.w2")?, Some(w("ffn.b2")?))?;
        if let Some(l) = prefix {
            f = tape.matmul(l, f)?;
        }
        h = tape.layer_norm(tape.add(h, f)?, w("ln2.gain")?, w("ln2.bias")?, LN_EPS)?;
    }
    Ok(h)
}

/// Per-action set contribution `ReLU(Ω(w_x y_i + b_x))` (k×D).
pub fn set_contributions(tape: &Tape, p: &Bound, y: Var) -> Result<Var, NumericError> {
    let u = linear(tape, y, get(p, "set.in.w")?, Some(get(p, "set.in.b")?))?;
    let hidden = tape.relu(linear(tape, u, get(p, "set.hidden.w")?, Some(get(p, "set.hidden.b")?))?)?;
    let out = linear(tape, hidden, get(p, "set.out.w")?, Some(get(p, "set.out.b")?))?;
    tape.relu(out)
}

/// Running sums `x_1..x_k` of the set contributions (k×D).
pub fn set_embed(tape: &Tape, p: &Bound, y: Var) -> Result<Var, NumericError> {
    let c = set_contributions(tape, p, y)?;
    let k = tape.shape(y)[0];
    let l = tape.constant(prefix_sum_matrix(k))?;
    tape.matmul(l, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_check, GradCheckOptions, GradStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(cfg: &EncoderConfig, marks: usize, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        init_params(&mut s, cfg, marks, &mut rng).unwrap();
        init_set_params(&mut s, cfg.d_model, &mut rng).unwrap();
        s
    }

    fn small_cfg() -> EncoderConfig {
        EncoderConfig { d_model: 4, heads: 2, blocks: 2, max_len: 8, ffn: FfnMode::Cumulative }
    }

    fn actions(pts: &[(usize, f64)]) -> Vec<Action> {
        pts.iter().map(|(m, t)| Action::new(*m, *t)).collect()
    }

    #[test]
    fn zero_weights_embed_to_bias() {
        let cfg = small_cfg();
        let mut s = store(&cfg, 3, 0);
        for name in ["enc.embed.mark", "enc.embed.time"] {
            s.get_mut(name).unwrap().fill(0.0);
        }
        *s.get_mut("enc.embed.bias").unwrap() = Tensor::vector(vec![0.5, -1.0, 2.0, 0.0]);
        let tape = Tape::new();
        let p = s.bind(&tape).unwrap();
        let y = tape.value(embed(&tape, &p, &actions(&[(1, 3.0)]), 1.0).unwrap());
        assert_eq!(y.values(), &[0.5, -1.0, 2.0, 0.0]);
    }

    #[test]
    fn embedding_matches_index_loop() {
        let cfg = EncoderConfig { d_model: 2, heads: 1, blocks: 0, max_len: 4, ffn: FfnMode::Cumulative };
        let s = store(&cfg, 2, 4);
        let acts = actions(&[(1, 0.5), (0, 2.0)]);
        let tape = Tape::new();
        let p = s.bind(&tape).unwrap();
        let y = tape.value(embed(&tape, &p, &acts, 2.0).unwrap());
        let e = s.get("enc.embed.mark").unwrap();
        let w = s.get("enc.embed.time").unwrap();
        let b = s.get("enc.embed.bias").unwrap();
        let mut prev = 0.0;
        for (i, a) in acts.iter().enumerate() {
            for j in 0..2 {
                let expect = e.get2(a.mark, j)
                    + w.get2(0, j) * a.time / 2.0
                    + w.get2(1, j) * (a.time - prev) / 2.0
                    + b.values()[j];
                assert!((y.get2(i, j) - expect).abs() < 1e-15);
            }
            prev = a.time;
        }
        let tape2 = Tape::new();
        let p2 = s.bind(&tape2).unwrap();
        let y2 = tape2.value(embed(&tape2, &p2, &actions(&[(1, 0.7)]), 2.0).unwrap());
        assert_ne!(y2.row(0), y.row(0));
    }

    #[test]
    fn positions_offset_rows() {
        let cfg = small_cfg();
        let s = store(&cfg, 2, 1);
        let tape = Tape::new();
        let p = s.bind(&tape).unwrap();
        let y = tape.constant(Tensor::zeros(&[3, 4])).unwrap();
        let h = tape.value(add_positions(&tape, &p, y).unwrap());
        let pos = s.get("enc.pos").unwrap();
        for i in 0..3 {
            assert_eq!(h.row(i), pos.row(i));
        }
        let long = tape.constant(Tensor::zeros(&[9, 4])).unwrap();
        assert!(matches!(add_positions(&tape, &p, long), Err(NumericError::Index { .. })));
    }

    #[test]
    fn positional_gradient_only_on_occupied_rows() {
        let cfg = small_cfg();
        let s = store(&cfg, 3, 2);
        let acts = actions(&[(0, 0.3), (2, 1.0), (1, 1.4)]);
        let tape = Tape::new();
        let p = s.bind(&tape).unwrap();
        let y = embed(&tape, &p, &acts, 1.0).unwrap();
        let h = encode(&tape, &p, &cfg, add_positions(&tape, &p, y).unwrap()).unwrap();
        let w = tape.constant(uniform(&mut ChaCha8Rng::seed_from_u64(9), &[3, 4], 1.0)).unwrap();
        let loss = tape.sum(tape.mul(h, w).unwrap()).unwrap();
        let mut g = GradStore::zeros_like(&s);
        tape.backward(loss, &mut g).unwrap();
        let gp = g.get("enc.pos").unwrap();
        for i in 0..8 {
            let nz = gp.row(i).iter().any(|v| *v != 0.0);
            assert_eq!(nz, i < 3, "row {i}");
        }
        let report = finite_difference_check(
            |st, t| {
                let p = st.bind(t)?;
                let y = embed(t, &p, &acts, 1.0)?;
                let h = encode(t, &p, &cfg, add_positions(t, &p, y)?)?;
                t.sum(t.mul(h, t.constant(tape.value(w))?)?)
            },
            &s,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passes(1e-5), "{:?}", report.worst());
    }

    #[test]
    fn single_step_attention_returns_value() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::matrix(1, 2, vec![0.3, -0.2]).unwrap()).unwrap();
        let k = tape.constant(Tensor::matrix(1, 2, vec![1.0, 4.0]).unwrap()).unwrap();
        let v = tape.constant(Tensor::matrix(1, 2, vec![7.0, -3.0]).unwrap()).unwrap();
        let (out, _) = causal_attention(&tape, q, k, v, 1).unwrap();
        assert_eq!(tape.value(out).values(), &[7.0, -3.0]);
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let tape = Tape::new();
        let q = tape.constant(uniform(&mut ChaCha8Rng::seed_from_u64(0), &[3, 2], 1.0)).unwrap();
        let k = tape.constant(Tensor::matrix(3, 2, vec![0.5, 0.1, 0.5, 0.1, 0.5, 0.1]).unwrap()).unwrap();
        let v = tape.constant(Tensor::zeros(&[3, 2])).unwrap();
        let (_, w) = causal_attention(&tape, q, k, v, 1).unwrap();
        let a = tape.value(w[0]);
        for j in 0..3 {
            assert!((a.get2(2, j) - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(a.get2(0, 1), 0.0);
    }

    #[test]
    fn attention_weights_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (n, d, heads) = (3, 4, 2);
        let qt = uniform(&mut rng, &[n, d], 1.0);
        let kt = uniform(&mut rng, &[n, d], 1.0);
        let tape = Tape::new();
        let q = tape.constant(qt.clone()).unwrap();
        let k = tape.constant(kt.clone()).unwrap();
        let v = tape.constant(Tensor::zeros(&[n, d])).unwrap();
        let (_, w) = causal_attention(&tape, q, k, v, heads).unwrap();
        let dh = d / heads;
        for h in 0..heads {
            let a = tape.value(w[h]);
            for i in 0..n {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| (0..dh).map(|c| qt.get2(i, h * dh + c) * kt.get2(j, h * dh + c)).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for j in 0..n {
                    let expect = if j <= i { (scores[j] - m).exp() / z } else { 0.0 };
                    assert!((a.get2(i, j) - expect).abs() < 1e-12);
                }
            }
        }
    }

    fn states(s: &ParamStore, cfg: &EncoderConfig, acts: &[Action]) -> Tensor {
        let tape = Tape::new();
        let p = s.bind(&tape).unwrap();
        let y = embed(&tape, &p, acts, 1.0).unwrap();
        tape.value(encode(&tape, &p, cfg, add_positions(&tape, &p, y).unwrap()).unwrap())
    }

    #[test]
    fn encode_is_causal() {
        for ffn in [FfnMode::Cumulative, FfnMode::Positionwise] {
            let cfg = EncoderConfig { ffn, ..small_cfg() };
            let s = store(&cfg, 4, 3);
            let base = actions(&[(0, 0.5), (1, 1.0), (3, 2.5), (2, 4.0), (1, 4.5)]);
            let full = states(&s, &cfg, &base);
            assert_eq!(full.shape(), &[5, 4]);
            let mut changed = base.clone();
            changed[3] = Action::new(0, 3.0);
            changed[4] = Action::new(3, 9.0);
            let other = states(&s, &cfg, &changed);
            for j in 0..3 {
                assert_eq!(full.row(j), other.row(j));
            }
            assert_ne!(full.row(3), other.row(3));
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let cfg = small_cfg();
        let s = store(&cfg, 4, 5);
        let out = states(&s, &cfg, &actions(&[(0, 0.5), (1, 1.0), (3, 2.5)]));
        for i in 0..3 {
            let row = out.row(i);
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_prefix_rejected() {
        let cfg = small_cfg();
        let s = store(&cfg, 2, 0);
        let tape = Tape::new();
        let p = s.bind(&tape).unwrap();
        assert!(matches!(embed(&tape, &p, &[], 1.0), Err(NumericError::Contract(_))));
    }

    #[test]
    fn set_embedding_is_incremental_and_order_free() {
        let cfg = small_cfg();
        let s = store(&cfg, 4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let yt = uniform(&mut rng, &[3, 4], 2.0);
        let tape = Tape::new();
        let p = s.bind(&tape).unwrap();
        let y = tape.constant(yt.clone()).unwrap();
        let x = tape.value(set_embed(&tape, &p, y).unwrap());
        let c = tape.value(set_contributions(&tape, &p, y).unwrap());
        assert_eq!(x.row(0), c.row(0));
        for j in 0..4 {
            assert!((x.get2(2, j) - (x.get2(1, j) + c.get2(2, j))).abs() < 1e-15);
        }
        let perm = Tensor::from_rows(&[yt.row(2).to_vec(), yt.row(0).to_vec(), yt.row(1).to_vec()]).unwrap();
        let yp = tape.constant(perm).unwrap();
        let xp = tape.value(set_embed(&tape, &p, yp).unwrap());
        for j in 0..4 {
            assert!((xp.get2(2, j) - x.get2(2, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let cfg = EncoderConfig { d_model: 6, heads: 4, ..EncoderConfig::default() };
        assert!(cfg.validate().is_err());
        assert!(EncoderConfig::default().validate().is_ok());
    }
}
