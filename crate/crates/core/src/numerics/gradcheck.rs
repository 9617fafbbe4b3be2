//! Central finite-difference verification of tape gradients.

use serde::Serialize;

use super::{GradStore, NumericError, ParamStore, Tape, Var};

/// Step size and error floor for [`finite_difference_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Magnitude below which errors are measured absolutely.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, floor: 1e-4 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

fn evaluate<F>(f: &F, store: &ParamStore) -> Result<f64, NumericError>
where
    F: Fn(&ParamStore, &Tape) -> Result<Var, NumericError>,
{
    let tape = Tape::new();
    let loss = f(store, &tape)?;
    let v = tape.item(loss);
    if !v.is_finite() {
        return Err(NumericError::NonFinite { op: "finite_difference_check" });
    }
    Ok(v)
}

/// Compares the tape gradient of `f` with `(f(θ+h) − f(θ−h)) / 2h` for every
/// scalar in `store`.
///
/// `f` records its loss on the tape it is handed and must be deterministic.
/// The per-entry error is `|a − n| / max(|a|, |n|, floor)`.
pub fn finite_difference_check<F>(
    f: F,
    store: &ParamStore,
    opts: GradCheckOptions,
) -> Result<GradCheckReport, NumericError>
where
    F: Fn(&ParamStore, &Tape) -> Result<Var, NumericError>,
{
    if opts.step <= 0.0 {
        return Err(NumericError::Contract("finite-difference step must be positive".into()));
    }
    let mut report = GradCheckReport::default();
    if store.is_empty() {
        return Ok(report);
    }

    let tape = Tape::new();
    let loss = f(store, &tape)?;
    let mut grads = GradStore::zeros_like(store);
    tape.backward(loss, &mut grads)?;

    let mut probe = store.clone();
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let analytic = grads.get(&name).expect("gradient slot").values().to_vec();
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (i, &a) in analytic.iter().enumerate() {
            let orig = probe.require(&name)?.values()[i];
            probe.get_mut(&name).expect("param").values_mut()[i] = orig + opts.step;
            let up = evaluate(&f, &probe)?;
            probe.get_mut(&name).expect("param").values_mut()[i] = orig - opts.step;
            let down = evaluate(&f, &probe)?;
            probe.get_mut(&name).expect("param").values_mut()[i] = orig;

            let n = (up - down) / (2.0 * opts.step);
            let err = (a - n).abs() / a.abs().max(n.abs()).max(opts.floor);
            if err > check.max_rel_error || i == 0 {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = n;
            }
            report.checked += 1;
        }
        report.max_rel_error = report.max_rel_error.max(check.max_rel_error);
        report.params.push(check);
    }
    Ok(report)
}
