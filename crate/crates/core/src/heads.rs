//! Mark, inter-action time and goal prediction heads.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::encoder::{get, uniform, Bound};
use crate::numerics::{NumericError, ParamStore, Tape, Tensor, Var};

/// Added to the softplus output so the variance stays strictly positive.
pub const VAR_FLOOR: f64 = 1e-4;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Next-mark probabilities over every mark plus EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkDist(pub Vec<f64>);

/// Goal probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct GoalDist(pub Vec<f64>);

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, p) in v.iter().enumerate() {
        if *p > v[best] {
            best = i;
        }
    }
    best
}

impl MarkDist {
    /// Most probable mark; ties go to the lowest id.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let mut u: f64 = rng.random_range(0.0..1.0);
        for (i, p) in self.0.iter().enumerate() {
            if u < *p {
                return i;
            }
            u -= p;
        }
        self.0.iter().rposition(|p| *p > 0.0).unwrap_or(0)
    }
}

impl GoalDist {
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// Lognormal parameters of the next inter-action gap.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeDensity {
    pub mu: f64,
    pub var: f64,
}

impl TimeDensity {
    pub fn new(mu: f64, var: f64) -> Result<Self, NumericError> {
        if !mu.is_finite() || !(var > 0.0 && var.is_finite()) {
            return Err(NumericError::Domain { op: "time_density", value: var });
        }
        Ok(Self { mu, var })
    }

    /// `log ρ(Δ)`; non-positive gaps are a domain error.
    pub fn log_density(&self, delta: f64) -> Result<f64, NumericError> {
        if !(delta > 0.0) {
            return Err(NumericError::Domain { op: "log_density", value: delta });
        }
        let l = delta.ln();
        Ok(-l - HALF_LN_2PI - 0.5 * self.var.ln() - (l - self.mu).powi(2) / (2.0 * self.var))
    }

    pub fn density(&self, delta: f64) -> f64 {
        if delta <= 0.0 {
            0.0
        } else {
            self.log_density(delta).map(f64::exp).unwrap_or(0.0)
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        let eps: f64 = StandardNormal.sample(rng);
        (self.mu + self.var.sqrt() * eps).exp()
    }

    /// Median gap `e^μ`.
    pub fn point(&self) -> f64 {
        self.mu.exp()
    }

    pub fn mode(&self) -> f64 {
        (self.mu - self.var).exp()
    }

    pub fn mean(&self) -> f64 {
        (self.mu + 0.5 * self.var).exp()
    }
}

/// Registers mark, time and goal head parameters.
pub fn init_params(
    store: &mut ParamStore,
    d: usize,
    mark_outputs: usize,
    num_goals: usize,
    num_clusters: usize,
    rng: &mut impl Rng,
) -> Result<(), NumericError> {
    let bound = 1.0 / (d as f64).sqrt();
    store.insert("head.mark.w", uniform(rng, &[d, mark_outputs], bound))?;
    store.insert("head.mark.b", Tensor::zeros(&[mark_outputs]))?;
    store.insert("head.time.z", uniform(rng, &[num_clusters, d], bound))?;
    store.insert("head.time.w", uniform(rng, &[d, 2], bound))?;
    store.insert("head.time.b", Tensor::zeros(&[2]))?;
    store.insert("head.goal.w", uniform(rng, &[d, num_goals], bound))?;
    store.insert("head.goal.b", Tensor::zeros(&[num_goals]))?;
    Ok(())
}

/// `s + α·x` for the set variant; `s` unchanged otherwise.
pub fn fuse(tape: &Tape, s: Var, x: Option<Var>, alpha: f64) -> Result<Var, NumericError> {
    match x {
        Some(x) => tape.add(s, tape.scale(x, alpha)?),
        None => Ok(s),
    }
}

/// Log-probabilities over marks and EOS per row of `h` (k×(|C|+1)).
pub fn mark_log_probs(tape: &Tape, p: &Bound, h: Var) -> Result<Var, NumericError> {
    let logits = tape.add_bias(tape.matmul(h, get(p, "head.mark.w")?)?, get(p, "head.mark.b")?)?;
    tape.log_softmax_rows(logits)
}

/// Lognormal `(μ, σ²)` per row (each k×1), gated by the cluster of the
/// action at that row.
pub fn time_params(tape: &Tape, p: &Bound, h: Var, clusters: &[usize]) -> Result<(Var, Var), NumericError> {
    let z = tape.gather_rows(get(p, "head.time.z")?, clusters)?;
    let gated = tape.mul(h, z)?;
    let out = tape.add_bias(tape.matmul(gated, get(p, "head.time.w")?)?, get(p, "head.time.b")?)?;
    let mu = tape.slice_cols(out, 0, 1)?;
    let raw = tape.slice_cols(out, 1, 1)?;
    let k = clusters.len();
    let floor = tape.constant(Tensor::filled(&[k, 1], VAR_FLOOR))?;
    let var = tape.add(tape.softplus(raw)?, floor)?;
    Ok((mu, var))
}

/// Goal log-probabilities per row: ReLU feature layer then log-softmax.
pub fn goal_log_probs(tape: &Tape, p: &Bound, h: Var) -> Result<Var, NumericError> {
    let phi = tape.relu(tape.add_bias(tape.matmul(h, get(p, "head.goal.w")?)?, get(p, "head.goal.b")?)?)?;
    tape.log_softmax_rows(phi)
}

/// Lognormal log-density on the tape for gaps `delta` (k×1 like `mu`).
pub fn log_density_tape(tape: &Tape, mu: Var, var: Var, delta: &[f64]) -> Result<Var, NumericError> {
    if let Some(bad) = delta.iter().find(|d| !(**d > 0.0)) {
        return Err(NumericError::Domain { op: "log_density", value: *bad });
    }
    let shape = tape.shape(mu);
    let ld: Vec<f64> = delta.iter().map(|d| d.ln()).collect();
    let log_delta = tape.constant(Tensor::new(shape.clone(), ld.clone())?)?;
    let const_part = tape.constant(Tensor::new(shape, ld.iter().map(|l| -l - HALF_LN_2PI).collect())?)?;
    let log_var = tape.log(var)?;
    let inv_var = tape.exp(tape.scale(log_var, -1.0)?)?;
    let diff = tape.sub(log_delta, mu)?;
    let quad = tape.scale(tape.mul(tape.mul(diff, diff)?, inv_var)?, 0.5)?;
    let out = tape.sub(const_part, tape.scale(log_var, 0.5)?)?;
    tape.sub(out, quad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bound_store(d: usize, marks: usize, goals: usize, m: usize) -> ParamStore {
        let mut s = ParamStore::new();
        init_params(&mut s, d, marks, goals, m, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        s
    }

    fn row_vec(tape: &Tape, v: &[f64]) -> Var {
        tape.constant(Tensor::matrix(1, v.len(), v.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn single_output_has_probability_one() {
        let s = bound_store(3, 1, 1, 1);
        let tape = Tape::new();
        let p = s.bind(&tape).unwrap();
        let h = row_vec(&tape, &[0.3, -1.0, 2.0]);
        let m = tape.value(tape.exp(mark_log_probs(&tape, &p, h).unwrap()).unwrap());
        let g = tape.value(tape.exp(goal_log_probs(&tape, &p, h).unwrap()).unwrap());
        assert_eq!(m.values(), &[1.0]);
        assert_eq!(g.values(), &[1.0]);
    }

    #[test]
    fn zero_weights_are_uniform() {
        let mut s = bound_store(3, 4, 3, 1);
        for n in ["head.mark.w", "head.goal.w"] {
            s.get_mut(n).unwrap().fill(0.0);
        }
        let tape = Tape::new();
        let p = s.bind(&tape).unwrap();
        let h = row_vec(&tape, &[0.3, -1.0, 2.0]);
        let m = tape.value(tape.exp(mark_log_probs(&tape, &p, h).unwrap()).unwrap());
        let g = tape.value(tape.exp(goal_log_probs(&tape, &p, h).unwrap()).unwrap());
        assert!(m.values().iter().all(|v| (v - 0.25).abs() < 1e-15));
        assert!(g.values().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn mark_head_matches_scalar_softmax() {
        let s = bound_store(2, 3, 1, 1);
        let tape = Tape::new();
        let p = s.bind(&tape).unwrap();
        let hv = [0.7, -0.4];
        let probs = tape.value(tape.exp(mark_log_probs(&tape, &p, row_vec(&tape, &hv)).unwrap()).unwrap());
        let w = s.get("head.mark.w").unwrap();
        let scores: Vec<f64> = (0..3).map(|c| hv[0] * w.get2(0, c) + hv[1] * w.get2(1, c)).collect();
        let z: f64 = scores.iter().map(|x| x.exp()).sum();
        for c in 0..3 {
            assert!((probs.values()[c] - scores[c].exp() / z).abs() < 1e-14);
        }
    }

    #[test]
    fn goal_head_matches_relu_softmax() {
        let mut s = bound_store(2, 2, 3, 1);
        *s.get_mut("head.goal.b").unwrap() = Tensor::vector(vec![0.1, -2.0, 0.4]);
        let tape = Tape::new();
        let p = s.bind(&tape).unwrap();
        let hv = [1.5, 0.2];
        let probs = tape.value(tape.exp(goal_log_probs(&tape, &p, row_vec(&tape, &hv)).unwrap()).unwrap());
        let w = s.get("head.goal.w").unwrap();
        let b = s.get("head.goal.b").unwrap();
        let phi: Vec<f64> =
            (0..3).map(|g| (hv[0] * w.get2(0, g) + hv[1] * w.get2(1, g) + b.values()[g]).max(0.0)).collect();
        let z: f64 = phi.iter().map(|x| x.exp()).sum();
        for g in 0..3 {
            assert!((probs.values()[g] - phi[g].exp() / z).abs() < 1e-14);
        }
    }

    #[test]
    fn single_cluster_time_head_is_affine_in_gated_state() {
        let mut s = bound_store(2, 2, 1, 1);
        *s.get_mut("head.time.w").unwrap() = Tensor::matrix(2, 2, vec![0.5, 0.0, -1.0, 0.0]).unwrap();
        *s.get_mut("head.time.b").unwrap() = Tensor::vector(vec![0.25, 0.0]);
        let z = s.get("head.time.z").unwrap().clone();
        let tape = Tape::new();
        let p = s.bind(&tape).unwrap();
        let hv = [2.0, 3.0];
        let (mu, var) = time_params(&tape, &p, row_vec(&tape, &hv), &[0]).unwrap();
        let expect = 0.5 * hv[0] * z.get2(0, 0) - hv[1] * z.get2(0, 1) + 0.25;
        assert!((tape.item(mu) - expect).abs() < 1e-15);
        assert!((tape.item(var) - (2f64.ln() + VAR_FLOOR)).abs() < 1e-15);
    }

    #[test]
    fn inactive_cluster_embedding_has_no_effect() {
        let s = bound_store(3, 2, 1, 2);
        let run = |s: &ParamStore, c: usize| {
            let tape = Tape::new();
            let p = s.bind(&tape).unwrap();
            let (mu, var) = time_params(&tape, &p, row_vec(&tape, &[0.4, -0.9, 1.3]), &[c]).unwrap();
            (tape.item(mu), tape.item(var))
        };
        let before = run(&s, 0);
        let mut changed = s.clone();
        changed.get_mut("head.time.z").unwrap().values_mut()[3..].iter_mut().for_each(|v| *v += 1.0);
        assert_eq!(run(&changed, 0), before);
        assert_ne!(run(&changed, 1), run(&s, 1));
        assert_ne!(run(&s, 1), before);
    }

    #[test]
    fn log_density_standard_value() {
        let d = TimeDensity::new(0.0, 1.0).unwrap();
        assert!((d.log_density(1.0).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-15);
        assert!(d.log_density(0.0).is_err());
        assert!(d.log_density(-1.0).is_err());
    }

    #[test]
    fn mode_found_by_grid_search() {
        let d = TimeDensity::new(0.3, 0.5).unwrap();
        let mut best = (0.0, f64::NEG_INFINITY);
        for i in 1..200_000 {
            let x = i as f64 * 1e-5;
            let v = d.log_density(x).unwrap();
            if v > best.1 {
                best = (x, v);
            }
        }
        assert!((best.0 - d.mode()).abs() < 2e-5);
    }

    #[test]
    fn tape_log_density_matches_scalar() {
        let tape = Tape::new();
        let mu = tape.constant(Tensor::matrix(2, 1, vec![0.2, -1.0]).unwrap()).unwrap();
        let var = tape.constant(Tensor::matrix(2, 1, vec![0.3, 2.0]).unwrap()).unwrap();
        let out = tape.value(log_density_tape(&tape, mu, var, &[1.5, 0.1]).unwrap());
        let a = TimeDensity::new(0.2, 0.3).unwrap().log_density(1.5).unwrap();
        let b = TimeDensity::new(-1.0, 2.0).unwrap().log_density(0.1).unwrap();
        assert!((out.values()[0] - a).abs() < 1e-14);
        assert!((out.values()[1] - b).abs() < 1e-14);
        assert!(log_density_tape(&tape, mu, var, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn degenerate_variance_samples_median() {
        let d = TimeDensity::new(1.2, 1e-12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert!((d.sample(&mut rng) / 1.2f64.exp() - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_alpha_fusion_is_identity() {
        let tape = Tape::new();
        let s = row_vec(&tape, &[0.1, -0.2]);
        let x = row_vec(&tape, &[5.0, 7.0]);
        let f = fuse(&tape, s, Some(x), 0.0).unwrap();
        assert_eq!(tape.value(f), tape.value(s));
    }

    #[test]
    fn mark_sampling_follows_probabilities() {
        let dist = MarkDist(vec![0.2, 0.0, 0.8]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut counts = [0usize; 3];
        for _ in 0..20_000 {
            counts[dist.sample(&mut rng)] += 1;
        }
        assert_eq!(counts[1], 0);
        assert!((counts[0] as f64 / 20_000.0 - 0.2).abs() < 0.01);
        assert_eq!(dist.argmax(), 2);
        assert_eq!(GoalDist(vec![0.5, 0.5]).argmax(), 0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn heads_normalize_and_variance_positive(
                hv in prop::collection::vec(-50.0f64..50.0, 4),
                seed in 0u64..1000,
            ) {
                let mut s = ParamStore::new();
                init_params(&mut s, 4, 5, 3, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                let tape = Tape::new();
                let p = s.bind(&tape).unwrap();
                let h = tape.constant(Tensor::matrix(1, 4, hv).unwrap()).unwrap();
                let m = tape.value(tape.exp(mark_log_probs(&tape, &p, h).unwrap()).unwrap());
                let g = tape.value(tape.exp(goal_log_probs(&tape, &p, h).unwrap()).unwrap());
                prop_assert!((m.values().iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!((g.values().iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(m.values().iter().chain(g.values()).all(|v| *v >= 0.0));
                let (_, var) = time_params(&tape, &p, h, &[1]).unwrap();
                prop_assert!(tape.item(var) > 0.0);
            }
        }
    }
}
