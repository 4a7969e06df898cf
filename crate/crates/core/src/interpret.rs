//! Attention maps, top-patch mining, pathway attention and pathway
//! attributions by integrated gradients over an attention gate.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{CaseRecord, TaskKind};
use crate::error::{Error, Result};
use crate::model::{argmax, ForwardTrace, LupiNetwork, Network, Prediction};
use crate::numerics::{Context, Tape};

pub const DEFAULT_STEPS: usize = 256;
pub const TOP_FRACTION: f64 = 0.01;
/// `case_id` of the cohort-mean rows in the attribution CSV.
pub const COHORT_MEAN_ID: &str = "cohort_mean";

/// Distilled-branch trace in evaluation mode.
pub fn distilled_trace(net: &LupiNetwork, features: &Array2<f64>) -> Result<ForwardTrace> {
    let mut tape = Tape::new();
    let vars = net.forward_distilled(&mut tape, features, &mut Context::eval())?;
    Ok(ForwardTrace::from_tape(&tape, &vars))
}

/// Per-patch attention averaged over pathways.
pub fn raw_patch_scores(trace: &ForwardTrace) -> Vec<f64> {
    let p = trace.attention.nrows() as f64;
    trace.attention.columns().into_iter().map(|c| c.sum() / p).collect()
}

/// Average-rank percentiles `(rank − 1)/(N − 1)`; a single value maps to 1.
pub fn percentile_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n == 1 {
        return vec![1.0];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their average
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = (avg_rank - 1.0) / (n - 1) as f64;
        }
        i = j + 1;
    }
    out
}

pub fn patch_attention_map(trace: &ForwardTrace) -> Vec<f64> {
    percentile_ranks(&raw_patch_scores(trace))
}

/// Mean attention each pathway receives per patch; sums to `P/N`.
pub fn pathway_attention_vector(trace: &ForwardTrace) -> Vec<f64> {
    let n = trace.attention.ncols() as f64;
    trace.attention.rows().into_iter().map(|r| r.sum() / n).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchRef {
    pub case_id: String,
    pub patch_index: usize,
    pub score: f64,
}

/// Number of patches kept out of `total`: `⌈fraction · total⌉`, at least one.
pub fn top_count(total: usize, fraction: f64) -> usize {
    ((fraction * total as f64).ceil() as usize).clamp(1.min(total), total)
}

/// Highest raw-score patches pooled over cases, ties broken by
/// `(case_id, patch_index)`.
pub fn top_attention_patches(maps: &[(String, Vec<f64>)], fraction: f64) -> Vec<PatchRef> {
    let mut all: Vec<PatchRef> = maps
        .iter()
        .flat_map(|(id, scores)| {
            scores.iter().enumerate().map(|(j, &s)| PatchRef {
                case_id: id.clone(),
                patch_index: j,
                score: s,
            })
        })
        .collect();
    all.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.case_id.cmp(&b.case_id))
            .then(a.patch_index.cmp(&b.patch_index))
    });
    all.truncate(top_count(all.len(), fraction));
    all
}

/// `(1/steps) Σ_k ∇f(m_k)` at midpoints `m_k = (k + ½)/steps · 1` of the
/// straight path from `0` to `1`. `value_grad` returns `f(m)` and `∇f(m)`.
pub fn integrated_gradients<F>(dim: usize, steps: usize, mut value_grad: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if steps == 0 {
        return Err(Error::invalid("steps", "must be at least 1"));
    }
    let mut total = vec![0.0; dim];
    for k in 0..steps {
        let t = (k as f64 + 0.5) / steps as f64;
        let (_, g) = value_grad(&vec![t; dim])?;
        if g.len() != dim {
            return Err(Error::Shape(format!("gradient has {} entries, expected {dim}", g.len())));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient at path point {k}")));
        }
        for (a, v) in total.iter_mut().zip(g) {
            *a += v;
        }
    }
    Ok(total.into_iter().map(|v| v / steps as f64).collect())
}

/// Scalar explained by attributions, as a function of the logits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    ClassProbability(usize),
    Risk,
}

impl Objective {
    /// Predicted class probability, or risk for survival, of the full model.
    pub fn for_prediction(task: TaskKind, full_logits: &[f64]) -> Self {
        match task {
            TaskKind::Classification { .. } => Objective::ClassProbability(argmax(full_logits)),
            TaskKind::Survival => Objective::Risk,
        }
    }

    /// Value and gradient with respect to the logits.
    pub fn value_grad(self, logits: &[f64]) -> (f64, Vec<f64>) {
        match self {
            Objective::ClassProbability(c) => {
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = e.iter().sum();
                let p: Vec<f64> = e.iter().map(|v| v / z).collect();
                let g = (0..p.len())
                    .map(|j| p[c] * (f64::from(u8::from(j == c)) - p[j]))
                    .collect();
                (p[c], g)
            }
            Objective::Risk => {
                let h: Vec<f64> = logits.iter().map(|&l| 1.0 / (1.0 + (-l).exp())).collect();
                let mut surv = Vec::with_capacity(h.len());
                let mut s = 1.0;
                for &hk in &h {
                    s *= 1.0 - hk;
                    surv.push(s);
                }
                let risk = surv.iter().map(|s| 1.0 - s).sum();
                // ∂S_k/∂l_j = −S_k h_j for j ≤ k
                let mut tail = 0.0;
                let mut g = vec![0.0; h.len()];
                for j in (0..h.len()).rev() {
                    tail += surv[j];
                    g[j] = tail * h[j];
                }
                (risk, g)
            }
        }
    }
}

/// Objective value and its gradient with respect to the `P` attention gates.
pub fn gated_value_grad(
    net: &LupiNetwork,
    features: &Array2<f64>,
    objective: Objective,
    gate: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let m = tape.input(Array2::from_shape_vec((gate.len(), 1), gate.to_vec()).expect("column"));
    let vars = net.forward_distilled_gated(&mut tape, features, Some(m), &mut Context::eval())?;
    let logits: Vec<f64> = tape.value(vars.logits).iter().copied().collect();
    let (value, dlogits) = objective.value_grad(&logits);
    // backpropagating logits·g yields ∂f/∂m by the chain rule
    let g = tape.constant(Array2::from_shape_vec((1, dlogits.len()), dlogits).expect("row"));
    let prod = tape.mul(vars.logits, g)?;
    let surrogate = tape.sum(prod);
    let grads = tape.backward_raw(surrogate)?;
    let dm = grads
        .get(m)
        .map(|g| g.iter().copied().collect())
        .unwrap_or_else(|| vec![0.0; gate.len()]);
    Ok((value, dm))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shapley {
    pub attributions: Vec<f64>,
    /// Objective with every pathway gated off and fully on.
    pub f0: f64,
    pub f1: f64,
}

impl Shapley {
    /// `|Σ attributions − (f(1) − f(0))|`.
    pub fn completeness_gap(&self) -> f64 {
        (self.attributions.iter().sum::<f64>() - (self.f1 - self.f0)).abs()
    }
}

pub fn pathway_shapley(net: &LupiNetwork, features: &Array2<f64>, steps: usize) -> Result<Shapley> {
    let p = net.config.n_pathways();
    let full = distilled_trace(net, features)?;
    let objective = Objective::for_prediction(net.config.task, &full.logits);
    let attributions = integrated_gradients(p, steps, |m| gated_value_grad(net, features, objective, m))?;
    let (f0, _) = gated_value_grad(net, features, objective, &vec![0.0; p])?;
    let (f1, _) = gated_value_grad(net, features, objective, &vec![1.0; p])?;
    Ok(Shapley { attributions, f0, f1 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub case_id: String,
    pub prediction: Prediction,
    /// Percentile attention per patch.
    pub patch_scores: Vec<f64>,
    /// Pathway-averaged attention per patch before the percentile transform.
    pub raw_patch_scores: Vec<f64>,
    /// This case's top patches by raw score.
    pub top_patch_ids: Vec<usize>,
    pub pathway_attention: Vec<f64>,
    pub pathway_shapley: Vec<f64>,
    pub completeness_gap: f64,
}

fn lupi(net: &Network) -> Result<&LupiNetwork> {
    match net {
        Network::Lupi(n) => Ok(n),
        Network::Abmil(_) => Err(Error::invalid("checkpoint", "attributions need the dual-branch model")),
    }
}

pub fn explain_case(net: &Network, case: &CaseRecord, steps: usize) -> Result<AttributionReport> {
    let lupi = lupi(net)?;
    let features = case.features();
    let trace = distilled_trace(lupi, features)?;
    let raw = raw_patch_scores(&trace);
    let top = top_attention_patches(&[(case.case_id.clone(), raw.clone())], TOP_FRACTION);
    let shapley = pathway_shapley(lupi, features, steps)?;
    Ok(AttributionReport {
        case_id: case.case_id.clone(),
        prediction: Prediction::from_logits(lupi.config.task, &trace.logits),
        patch_scores: percentile_ranks(&raw),
        raw_patch_scores: raw,
        top_patch_ids: top.into_iter().map(|r| r.patch_index).collect(),
        pathway_attention: pathway_attention_vector(&trace),
        completeness_gap: shapley.completeness_gap(),
        pathway_shapley: shapley.attributions,
    })
}

/// Reports for every case, computed in parallel, in input order.
pub fn explain_cases(net: &Network, cases: &[CaseRecord], steps: usize) -> Result<Vec<AttributionReport>> {
    cases.par_iter().map(|c| explain_case(net, c, steps)).collect()
}

/// Cases whose predicted class matches the label (survival: all cases).
pub fn correctly_predicted<'a>(reports: &'a [AttributionReport], cases: &[CaseRecord]) -> Vec<&'a AttributionReport> {
    reports
        .iter()
        .zip(cases)
        .filter(|(r, c)| match (r.prediction.predicted_class(), c.label.class_index()) {
            (Some(p), Some(l)) => p == l,
            _ => true,
        })
        .map(|(r, _)| r)
        .collect()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// `case_id,slide_id,patch_index,x,y,percentile_score`; coordinates are
/// empty when the feature file carries none.
pub fn write_attention_map(path: &Path, reports: &[AttributionReport], cases: &[CaseRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["case_id", "slide_id", "patch_index", "x", "y", "percentile_score"])
        .map_err(|e| csv_err(path, e))?;
    for (r, c) in reports.iter().zip(cases) {
        for (origin, score) in c.patch_origins().iter().zip(&r.patch_scores) {
            let (x, y) = origin
                .coords
                .map_or((String::new(), String::new()), |[x, y]| (x.to_string(), y.to_string()));
            w.write_record([
                r.case_id.clone(),
                origin.slide_id.clone(),
                origin.index.to_string(),
                x,
                y,
                score.to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `case_id,pathway_name,attribution` per case, then one
/// [`COHORT_MEAN_ID`] row per pathway.
pub fn write_shapley(path: &Path, reports: &[AttributionReport], pathway_names: &[&str]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["case_id", "pathway_name", "attribution"])
        .map_err(|e| csv_err(path, e))?;
    for r in reports {
        for (name, a) in pathway_names.iter().zip(&r.pathway_shapley) {
            w.write_record([r.case_id.as_str(), name, &a.to_string()])
                .map_err(|e| csv_err(path, e))?;
        }
    }
    if !reports.is_empty() {
        for (p, name) in pathway_names.iter().enumerate() {
            let mean = reports.iter().map(|r| r.pathway_shapley[p]).sum::<f64>() / reports.len() as f64;
            w.write_record([COHORT_MEAN_ID, name, &mean.to_string()])
                .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the full reports as JSON lines.
pub fn write_reports(path: &Path, reports: &[AttributionReport]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in reports {
        let line = serde_json::to_string(r).expect("report serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}
