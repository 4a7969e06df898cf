//! Central finite-difference comparison for tape-built scalar functions.

use super::params::ParameterStore;
use super::tape::{Mat, Tape, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so gradients that are
/// numerically zero compare on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Location of the worst entry, e.g. `param w[1,0]` or `input 0[0,2]`.
    pub worst: String,
    pub entries: usize,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the reverse-mode gradient of `build` with central differences of
/// step `h`, over every trainable parameter in `store` and every input.
pub fn check_gradients<F>(
    store: &mut ParameterStore,
    inputs: &[Mat],
    h: f64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParameterStore, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParameterStore, inputs: &[Mat]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.constant(m.clone())).collect();
        let out = build(&mut tape, store, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.input(m.clone())).collect();
    let out = build(&mut tape, store, &vars)?;
    if !tape.scalar(out).is_finite() {
        return Err(Error::NonFinite("gradcheck objective".into()));
    }
    let grads = tape.backward(out, store)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        entries: 0,
    };
    let mut record = |err: f64, place: String| {
        report.entries += 1;
        if err > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = err.max(report.max_rel_error);
            report.worst = place;
        }
    };

    let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for id in ids {
        let analytic = store.grad(id).clone();
        let (rows, cols) = analytic.dim();
        for r in 0..rows {
            for c in 0..cols {
                let orig = store.value(id)[[r, c]];
                store.value_mut(id)[[r, c]] = orig + h;
                let plus = eval(store, inputs)?;
                store.value_mut(id)[[r, c]] = orig - h;
                let minus = eval(store, inputs)?;
                store.value_mut(id)[[r, c]] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let err = rel_error(analytic[[r, c]], numeric);
                record(err, format!("param {}[{r},{c}]", store.name(id)));
            }
        }
    }

    let mut perturbed: Vec<Mat> = inputs.to_vec();
    for (k, &var) in vars.iter().enumerate() {
        let analytic = grads
            .get(var)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(inputs[k].dim()));
        let (rows, cols) = inputs[k].dim();
        for r in 0..rows {
            for c in 0..cols {
                let orig = inputs[k][[r, c]];
                perturbed[k][[r, c]] = orig + h;
                let plus = eval(store, &perturbed)?;
                perturbed[k][[r, c]] = orig - h;
                let minus = eval(store, &perturbed)?;
                perturbed[k][[r, c]] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                record(rel_error(analytic[[r, c]], numeric), format!("input {k}[{r},{c}]"));
            }
        }
    }
    Ok(report)
}
