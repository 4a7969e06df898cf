//! Training objectives, recorded on a [`Tape`].
//!
//! Every alignment loss takes the privileged quantity as a target and
//! detaches it, so no gradient reaches the privileged-only parameters
//! through rec/attn/rep.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::datamodel::TaskLabel;
use crate::error::{Error, Result};
use crate::numerics::{softmax_rows, Mat, Tape, Var};

/// Tolerance on row sums when checking probability rows.
const ROW_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sup_priv: f64,
    pub sup_distill: f64,
    pub rec: f64,
    pub attn: f64,
    pub rep: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn alignment(&self) -> f64 {
        self.rec + self.attn + self.rep
    }

    /// `(name, value)` pairs in column order, total last.
    pub fn terms(&self) -> [(&'static str, f64); 6] {
        [
            ("sup_priv", self.sup_priv),
            ("sup_distill", self.sup_distill),
            ("rec", self.rec),
            ("attn", self.attn),
            ("rep", self.rep),
            ("total", self.total),
        ]
    }

    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.sup_priv += other.sup_priv;
        self.sup_distill += other.sup_distill;
        self.rec += other.rec;
        self.attn += other.attn;
        self.rep += other.rep;
        self.total += other.total;
    }

    pub fn scaled(&self, k: f64) -> LossBreakdown {
        LossBreakdown {
            sup_priv: self.sup_priv * k,
            sup_distill: self.sup_distill * k,
            rec: self.rec * k,
            attn: self.attn * k,
            rep: self.rep * k,
            total: self.total * k,
        }
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.terms().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }
}

/// Combines the part values: `sup_priv + sup_distill + λ(rec + attn + rep)`.
pub fn loss_total(sup_priv: f64, sup_distill: f64, rec: f64, attn: f64, rep: f64, lambda: f64) -> Result<LossBreakdown> {
    let mut b = LossBreakdown {
        sup_priv,
        sup_distill,
        rec,
        attn,
        rep,
        total: 0.0,
    };
    if let Some(term) = b.first_non_finite() {
        return Err(Error::NonFinite(format!("loss term {term}")));
    }
    b.total = sup_priv + sup_distill + lambda * (rec + attn + rep);
    Ok(b)
}

/// Tape handles of every term for one case.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub sup_priv: Var,
    pub sup_distill: Var,
    pub rec: Var,
    pub attn: Var,
    pub rep: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            sup_priv: tape.scalar(self.sup_priv),
            sup_distill: tape.scalar(self.sup_distill),
            rec: tape.scalar(self.rec),
            attn: tape.scalar(self.attn),
            rep: tape.scalar(self.rep),
            total: tape.scalar(self.total),
        }
    }
}

/// Records `total = sup_priv + sup_distill + λ(rec + attn + rep)`.
pub fn total_on_tape(tape: &mut Tape, sup_priv: Var, sup_distill: Var, rec: Var, attn: Var, rep: Var, lambda: f64) -> Result<LossVars> {
    let sup = tape.add(sup_priv, sup_distill)?;
    let align = tape.add(rec, attn)?;
    let align = tape.add(align, rep)?;
    let align = tape.scale(align, lambda);
    let total = tape.add(sup, align)?;
    Ok(LossVars {
        sup_priv,
        sup_distill,
        rec,
        attn,
        rep,
        total,
    })
}

fn same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    let (x, y) = (tape.value(a).dim(), tape.value(b).dim());
    if x != y {
        return Err(Error::Shape(format!("{what}: {x:?} vs {y:?}")));
    }
    Ok(())
}

/// `−Σ softmax(target)·log softmax(pred)`, summed over rows.
pub fn soft_cross_entropy(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    same_shape(tape, pred, target, "soft cross-entropy")?;
    let t = tape.value(target);
    if t.ncols() == 0 {
        return Err(Error::Shape("soft cross-entropy over empty rows".into()));
    }
    let t = tape.constant(softmax_rows(t));
    let lp = tape.log_softmax_rows(pred)?;
    let prod = tape.mul(t, lp)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, -1.0))
}

/// `Σ_p (‖ẑ_p − z_p‖₁ + SCE(ẑ_p, z_p))` with `z` detached.
pub fn loss_reconstruction(tape: &mut Tape, zhat: Var, z: Var) -> Result<Var> {
    same_shape(tape, zhat, z, "reconstruction")?;
    let z = tape.detach(z);
    let diff = tape.sub(zhat, z)?;
    let l1 = tape.abs(diff);
    let l1 = tape.sum(l1);
    let sce = soft_cross_entropy(tape, zhat, z)?;
    tape.add(l1, sce)
}

fn check_probability_rows(m: &Mat, what: &str) -> Result<()> {
    for (p, row) in m.rows().into_iter().enumerate() {
        // NaN propagates into the loss value and is reported by the caller
        if row.iter().any(|v| v.is_nan()) {
            continue;
        }
        let bad = row.iter().any(|&v| !(v >= 0.0 && v.is_finite())) || (row.sum() - 1.0).abs() > ROW_TOL;
        if bad {
            return Err(Error::invalid(what, format!("row {p} is not a probability vector")));
        }
    }
    Ok(())
}

/// Mean over rows of `KL(α_priv ‖ α_distill)`, privileged side detached.
pub fn loss_attention_align(tape: &mut Tape, distill: Var, privileged: Var) -> Result<Var> {
    same_shape(tape, distill, privileged, "attention alignment")?;
    let q = tape.value(distill).clone();
    let p = tape.value(privileged).clone();
    check_probability_rows(&q, "distilled attention")?;
    check_probability_rows(&p, "privileged attention")?;
    let rows = p.nrows().max(1) as f64;
    let value = Array2::from_elem((1, 1), kl_rows(&p, &q.mapv(f64::ln)) / rows);
    Ok(tape.custom(
        &[distill],
        value,
        Box::new(move |_, _, g| {
            let g = g[[0, 0]];
            vec![Array2::from_shape_fn(q.dim(), |ix| {
                if p[ix] > 0.0 {
                    -g * p[ix] / (q[ix] * rows)
                } else {
                    0.0
                }
            })]
        }),
    ))
}

/// [`loss_attention_align`] taking `ln α_distill` instead of `α_distill`,
/// so distilled entries that underflow to zero keep a finite loss.
pub fn loss_attention_align_log(tape: &mut Tape, log_distill: Var, privileged: Var) -> Result<Var> {
    same_shape(tape, log_distill, privileged, "attention alignment")?;
    let q = tape.value(log_distill).mapv(f64::exp);
    check_probability_rows(&q, "distilled attention")?;
    kl_to_log(tape, log_distill, privileged)
}

/// `Σ p·(ln p − ln q)` over entries with `p > 0`.
fn kl_rows(p: &Mat, log_q: &Mat) -> f64 {
    p.iter()
        .zip(log_q.iter())
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &lqi)| pi * (pi.ln() - lqi))
        .sum()
}

fn kl_to_log(tape: &mut Tape, log_q: Var, privileged: Var) -> Result<Var> {
    let lq = tape.value(log_q).clone();
    let p = tape.value(privileged).clone();
    check_probability_rows(&p, "privileged attention")?;
    let rows = p.nrows().max(1) as f64;
    let value = Array2::from_elem((1, 1), kl_rows(&p, &lq) / rows);
    Ok(tape.custom(
        &[log_q],
        value,
        Box::new(move |_, _, g| {
            let g = g[[0, 0]];
            vec![p.mapv(|pi| -g * pi / rows)]
        }),
    ))
}

/// Mean squared error with the privileged representation detached.
pub fn loss_representation(tape: &mut Tape, distill: Var, privileged: Var) -> Result<Var> {
    same_shape(tape, distill, privileged, "representation")?;
    let target = tape.detach(privileged);
    let d = tape.sub(distill, target)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// `−log softmax(logits)[label]` for a `1 × C` logit row.
pub fn loss_classification(tape: &mut Tape, logits: Var, label: usize) -> Result<Var> {
    let (rows, classes) = tape.value(logits).dim();
    if rows != 1 || label >= classes {
        return Err(Error::Shape(format!("label {label} for logits of shape ({rows}, {classes})")));
    }
    let lp = tape.log_softmax_rows(logits)?;
    let onehot = tape.constant(Array2::from_shape_fn((1, classes), |(_, j)| if j == label { -1.0 } else { 0.0 }));
    let picked = tape.mul(lp, onehot)?;
    Ok(tape.sum(picked))
}

/// Interior quantile edges (`n_bins − 1` values) of the event times, or of
/// all times when there are no events.
pub fn survival_bin_edges(times: &[f64], events: &[bool], n_bins: usize) -> Vec<f64> {
    let mut sample: Vec<f64> = times.iter().zip(events).filter(|(_, &e)| e).map(|(&t, _)| t).collect();
    if sample.is_empty() {
        sample = times.to_vec();
    }
    sample.sort_by(f64::total_cmp);
    if sample.is_empty() {
        return Vec::new();
    }
    (1..n_bins)
        .map(|k| {
            let pos = k as f64 / n_bins as f64 * (sample.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sample[lo] + (pos - lo as f64) * (sample[hi] - sample[lo])
        })
        .collect()
}

/// Index of the bin holding `time`: bin `b` covers `(edges[b−1], edges[b]]`;
/// anything beyond the last bin is clamped into it.
pub fn time_bin(time: f64, edges: &[f64], n_bins: usize) -> usize {
    edges.iter().filter(|&&e| time > e).count().min(n_bins.saturating_sub(1))
}

/// Discrete-time hazard negative log-likelihood plus `μ_l1·‖head_weight‖₁`.
pub fn loss_survival(
    tape: &mut Tape,
    hazard_logits: Var,
    time: f64,
    event: bool,
    bin_edges: &[f64],
    head_weight: Option<Var>,
    l1: f64,
) -> Result<Var> {
    let (rows, k) = tape.value(hazard_logits).dim();
    if rows != 1 || k == 0 {
        return Err(Error::Shape(format!("hazard logits of shape ({rows}, {k})")));
    }
    let b = time_bin(time, bin_edges, k);
    // −log(1 − h_j) = softplus(l_j); −log h_b = softplus(−l_b)
    let survive_mask = Array2::from_shape_fn((1, k), |(_, j)| {
        let upto = if event { j < b } else { j <= b };
        if upto {
            1.0
        } else {
            0.0
        }
    });
    let survive_mask = tape.constant(survive_mask);
    let sp = tape.softplus(hazard_logits);
    let survive = tape.mul(sp, survive_mask)?;
    let mut nll = tape.sum(survive);
    if event {
        let neg = tape.scale(hazard_logits, -1.0);
        let sp_neg = tape.softplus(neg);
        let mask = tape.constant(Array2::from_shape_fn((1, k), |(_, j)| if j == b { 1.0 } else { 0.0 }));
        let hit = tape.mul(sp_neg, mask)?;
        let hit = tape.sum(hit);
        nll = tape.add(nll, hit)?;
    }
    if let (Some(w), true) = (head_weight, l1 > 0.0) {
        let a = tape.abs(w);
        let s = tape.sum(a);
        let reg = tape.scale(s, l1);
        nll = tape.add(nll, reg)?;
    }
    Ok(nll)
}

/// Task-dispatched supervised loss for one branch.
pub fn loss_supervised(
    tape: &mut Tape,
    logits: Var,
    label: &TaskLabel,
    bin_edges: &[f64],
    head_weight: Option<Var>,
    l1: f64,
) -> Result<Var> {
    match *label {
        TaskLabel::Classification { class_index, .. } => loss_classification(tape, logits, class_index),
        TaskLabel::Survival { time, event } => loss_survival(tape, logits, time, event, bin_edges, head_weight, l1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar<F: FnOnce(&mut Tape) -> Result<Var>>(f: F) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape).unwrap();
        tape.scalar(v)
    }

    fn softmax(v: &[f64]) -> Vec<f64> {
        let m = v.iter().copied().fold(f64::MIN, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|x| x / s).collect()
    }

    fn sce_oracle(pred: &[f64], target: &[f64]) -> f64 {
        let t = softmax(target);
        let p = softmax(pred);
        -t.iter().zip(&p).map(|(a, b)| a * b.ln()).sum::<f64>()
    }

    fn entropy(v: &[f64]) -> f64 {
        -softmax(v).iter().map(|p| p * p.ln()).sum::<f64>()
    }

    fn row(v: &[f64]) -> Mat {
        Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap()
    }

    fn sce(pred: &[f64], target: &[f64]) -> f64 {
        scalar(|t| {
            let p = t.input(row(pred));
            let q = t.constant(row(target));
            soft_cross_entropy(t, p, q)
        })
    }

    #[test]
    fn sce_examples() {
        assert!((sce(&[0.0, 0.0], &[0.0, 0.0]) - 2f64.ln()).abs() < 1e-12);
        let t = [0.3, -1.2, 2.0];
        assert!((sce(&t, &t) - entropy(&t)).abs() < 1e-12);
        assert!(sce(&[0.5, 0.5, 0.5], &t) > entropy(&t));
        let v = sce(&[10.0, -10.0], &[-10.0, 10.0]);
        assert!((v - 20.0).abs() < 1e-6, "{v}");
        assert!((v - sce_oracle(&[10.0, -10.0], &[-10.0, 10.0])).abs() < 1e-12);
    }

    #[test]
    fn sce_target_gets_no_gradient() {
        let mut tape = Tape::new();
        let p = tape.input(row(&[0.1, 0.4]));
        let q = tape.input(row(&[1.0, -1.0]));
        let l = soft_cross_entropy(&mut tape, p, q).unwrap();
        let g = tape.backward_raw(l).unwrap();
        assert!(g.get(q).is_none_or(|m| m.iter().all(|&v| v == 0.0)));
        assert!(g.get(p).is_some());
    }

    fn rec(zhat: Mat, z: Mat) -> f64 {
        scalar(|t| {
            let a = t.input(zhat);
            let b = t.input(z);
            loss_reconstruction(t, a, b)
        })
    }

    #[test]
    fn reconstruction_examples() {
        let z = array![[1.0, 2.0, 0.5], [-1.0, 0.0, 3.0]];
        let expect: f64 = z.rows().into_iter().map(|r| entropy(r.as_slice().unwrap())).sum();
        assert!((rec(z.clone(), z.clone()) - expect).abs() < 1e-12);

        let shifted = rec(array![[2.0, 3.0]], array![[1.0, 2.0]]);
        assert!((shifted - (2.0 + entropy(&[1.0, 2.0]))).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Array2::from_shape_fn((2, 3), |_| rng.random_range(-2.0..2.0));
        let b = Array2::from_shape_fn((2, 3), |_| rng.random_range(-2.0..2.0));
        let oracle: f64 = (0..2)
            .map(|p| {
                let ar: Vec<f64> = a.row(p).to_vec();
                let br: Vec<f64> = b.row(p).to_vec();
                ar.iter().zip(&br).map(|(x, y)| (x - y).abs()).sum::<f64>() + sce_oracle(&ar, &br)
            })
            .sum();
        assert!((rec(a, b) - oracle).abs() < 1e-9);
    }

    fn attn(d: Mat, p: Mat) -> Result<f64> {
        let mut tape = Tape::new();
        let a = tape.input(d);
        let b = tape.input(p);
        let v = loss_attention_align(&mut tape, a, b)?;
        Ok(tape.scalar(v))
    }

    #[test]
    fn attention_examples() {
        let m = array![[0.2, 0.8], [0.5, 0.5]];
        assert_eq!(attn(m.clone(), m).unwrap(), 0.0);
        let v = attn(array![[0.5, 0.5]], array![[1.0, 0.0]]).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rand_rows = |rng: &mut ChaCha8Rng| {
            let raw = Array2::from_shape_fn((3, 4), |_| rng.random_range(-2.0..2.0));
            softmax_rows(&raw)
        };
        let q = rand_rows(&mut rng);
        let p = rand_rows(&mut rng);
        let oracle: f64 = p.iter().zip(q.iter()).map(|(a, b)| a * (a / b).ln()).sum::<f64>() / 3.0;
        let v = attn(q, p).unwrap();
        assert!((v - oracle).abs() < 1e-12);
        assert!(v > 0.0);
    }

    #[test]
    fn log_form_matches_and_survives_underflow() {
        let logits = array![[0.3, -1.2, 2.0], [900.0, 0.0, -5.0]];
        let p = array![[0.2, 0.3, 0.5], [0.6, 0.3, 0.1]];
        let via_log = |logits: &Mat| {
            let mut tape = Tape::new();
            let x = tape.input(logits.clone());
            let lq = tape.log_softmax_rows(x).unwrap();
            let t = tape.input(p.clone());
            let v = loss_attention_align_log(&mut tape, lq, t).unwrap();
            tape.scalar(v)
        };
        let first = logits.slice(ndarray::s![0..1, ..]).to_owned();
        let mut tape = Tape::new();
        let x = tape.input(first.clone());
        let lq = tape.log_softmax_rows(x).unwrap();
        let t = tape.input(p.slice(ndarray::s![0..1, ..]).to_owned());
        let v = loss_attention_align_log(&mut tape, lq, t).unwrap();
        let direct = attn(softmax_rows(&first), p.slice(ndarray::s![0..1, ..]).to_owned()).unwrap();
        assert!((tape.scalar(v) - direct).abs() < 1e-12);

        // exp(−900) underflows; the probability form is infinite here
        let v = via_log(&logits);
        assert!(v.is_finite() && v > 100.0);
        assert!(!attn(softmax_rows(&logits), p.clone()).unwrap().is_finite());
    }

    #[test]
    fn attention_rejects_non_probability_rows() {
        assert!(attn(array![[0.5, 0.6]], array![[0.5, 0.5]]).is_err());
        assert!(attn(array![[0.5, 0.5]], array![[1.5, -0.5]]).is_err());
    }

    fn rep(a: &[f64], b: &[f64]) -> f64 {
        scalar(|t| {
            let x = t.input(row(a));
            let y = t.input(row(b));
            loss_representation(t, x, y)
        })
    }

    #[test]
    fn representation_examples() {
        assert_eq!(rep(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(rep(&[0.0, 0.0], &[3.0, 4.0]), 12.5);
        let a = [0.1, -0.5, 2.0, 1.5, 0.0];
        let b = [1.1, 0.5, -2.0, 1.0, 0.3];
        let oracle = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 5.0;
        assert!((rep(&a, &b) - oracle).abs() < 1e-12);
    }

    fn ce(logits: &[f64], label: usize) -> f64 {
        scalar(|t| {
            let l = t.input(row(logits));
            loss_classification(t, l, label)
        })
    }

    #[test]
    fn classification_examples() {
        assert!((ce(&[0.0, 0.0], 0) - 2f64.ln()).abs() < 1e-12);
        assert!(ce(&[100.0, 0.0], 0) < 1e-12);
        let l = [0.3, -1.0, 2.2];
        assert!((ce(&l, 1) + softmax(&l)[1].ln()).abs() < 1e-12);
    }

    fn surv_oracle(logits: &[f64], b: usize, event: bool) -> f64 {
        let h: Vec<f64> = logits.iter().map(|l| 1.0 / (1.0 + (-l).exp())).collect();
        let s = |k: usize| h[..=k].iter().map(|x| 1.0 - x).product::<f64>();
        if event {
            let prev = if b == 0 { 1.0 } else { s(b - 1) };
            -(h[b].ln()) - prev.ln()
        } else {
            -s(b).ln()
        }
    }

    fn surv(logits: &[f64], time: f64, event: bool, edges: &[f64]) -> f64 {
        scalar(|t| {
            let l = t.input(row(logits));
            loss_survival(t, l, time, event, edges, None, 0.0)
        })
    }

    #[test]
    fn survival_examples() {
        assert!((surv(&[0.0], 5.0, true, &[]) - 2f64.ln()).abs() < 1e-12);
        assert!(surv(&[-40.0], 5.0, false, &[]) < 1e-15);
        let logits = [0.4, -0.7, 1.3, -0.1];
        let edges = [10.0, 20.0, 30.0];
        for (time, b) in [(5.0, 0), (15.0, 1), (20.0, 1), (25.0, 2), (99.0, 3)] {
            for event in [true, false] {
                let v = surv(&logits, time, event, &edges);
                assert!((v - surv_oracle(&logits, b, event)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn survival_l1_uses_head_weights() {
        let mut tape = Tape::new();
        let l = tape.input(row(&[0.0]));
        let w = tape.input(array![[1.0, -2.0]]);
        let v = loss_survival(&mut tape, l, 1.0, true, &[], Some(w), 0.5).unwrap();
        assert!((tape.scalar(v) - (2f64.ln() + 1.5)).abs() < 1e-12);
    }

    #[test]
    fn bins_clamp_and_edges_interpolate() {
        assert_eq!(time_bin(1e9, &[1.0, 2.0], 2), 1);
        let edges = survival_bin_edges(&[1.0, 2.0, 3.0, 4.0, 5.0], &[true; 5], 4);
        assert_eq!(edges, vec![2.0, 3.0, 4.0]);
        let censored_only = survival_bin_edges(&[1.0, 3.0], &[false, false], 2);
        assert_eq!(censored_only, vec![2.0]);
    }

    #[test]
    fn total_examples() {
        assert_eq!(loss_total(1.0, 2.0, 3.0, 4.0, 5.0, 0.0).unwrap().total, 3.0);
        assert_eq!(loss_total(1.0, 1.0, 1.0, 1.0, 1.0, 1.0).unwrap().total, 5.0);
        assert_eq!(loss_total(1.0, 1.0, 2.0, 2.0, 2.0, 0.5).unwrap().total, 5.0);
        assert!(matches!(loss_total(1.0, f64::NAN, 0.0, 0.0, 0.0, 1.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn tape_total_matches_scalar_total() {
        let mut tape = Tape::new();
        let parts: Vec<Var> = [1.0, 1.0, 2.0, 2.0, 2.0].iter().map(|&v| tape.constant(array![[v]])).collect();
        let vars = total_on_tape(&mut tape, parts[0], parts[1], parts[2], parts[3], parts[4], 0.5).unwrap();
        assert_eq!(vars.breakdown(&tape).total, 5.0);
    }
}
