//! Metric reports over prediction rows.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::rundir::PredictionRow;
use crate::datamodel::{TaskKind, TaskLabel};
use crate::error::{Error, Result};
use crate::metrics::{auc, bootstrap_ci, c_index, classification_metrics, risk_split_logrank, F1Average, MetricReport};
use crate::model::Prediction;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRankSummary {
    pub median_risk: f64,
    pub n_high: usize,
    pub n_low: usize,
    pub chi2: f64,
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskKind,
    pub n_cases: usize,
    pub metrics: Vec<MetricReport>,
    /// Primary metric per fold, when rows carry fold indices; `None` where
    /// a fold's metric is undefined (one class, no comparable pairs).
    pub fold_metrics: BTreeMap<usize, Option<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logrank: Option<LogRankSummary>,
}

impl EvalReport {
    pub fn metric(&self, name: &str) -> Option<&MetricReport> {
        self.metrics.iter().find(|m| m.metric == name)
    }
}

fn labelled<'a>(rows: &[&'a PredictionRow]) -> Result<Vec<(&'a Prediction, TaskLabel)>> {
    rows.iter()
        .map(|r| {
            r.label
                .map(|l| (&r.prediction, l))
                .ok_or_else(|| Error::invalid("label", format!("case {} has no label", r.case_id)))
        })
        .collect()
}

fn probs(p: &Prediction) -> &[f64] {
    match p {
        Prediction::Classification { probs } => probs,
        Prediction::Survival { hazards, .. } => hazards,
    }
}

/// Name of the task's primary metric.
pub fn primary_metric_name(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Classification { .. } => "auc",
        TaskKind::Survival => "c_index",
    }
}

/// AUC (binary), mean one-vs-rest AUC (multi-class) or C-index.
pub fn primary_metric(task: TaskKind, rows: &[&PredictionRow]) -> Result<f64> {
    let data = labelled(rows)?;
    match task {
        TaskKind::Classification { n_classes } => {
            let labels: Vec<usize> = data.iter().filter_map(|(_, l)| l.class_index()).collect();
            let classes: Vec<usize> = if n_classes == 2 { vec![1] } else { (0..n_classes).collect() };
            let mut total = 0.0;
            for &c in &classes {
                let scores: Vec<f64> = data.iter().map(|(p, _)| probs(p)[c]).collect();
                let truth: Vec<bool> = labels.iter().map(|&l| l == c).collect();
                total += auc(&scores, &truth)?;
            }
            Ok(total / classes.len() as f64)
        }
        TaskKind::Survival => {
            let (risks, (times, events)) = survival_columns(&data)?;
            c_index(&risks, &times, &events)
        }
    }
}

type SurvivalColumns = (Vec<f64>, (Vec<f64>, Vec<bool>));

fn survival_columns(data: &[(&Prediction, TaskLabel)]) -> Result<SurvivalColumns> {
    data.iter()
        .map(|(p, l)| match (p, l) {
            (Prediction::Survival { risk, .. }, TaskLabel::Survival { time, event }) => Ok((*risk, (*time, *event))),
            _ => Err(Error::invalid("predictions", "survival rows expected")),
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().unzip())
}

fn accuracy_f1(rows: &[&PredictionRow]) -> Result<(f64, f64)> {
    let data = labelled(rows)?;
    let p: Vec<Vec<f64>> = data.iter().map(|(p, _)| probs(p).to_vec()).collect();
    let l: Vec<usize> = data.iter().filter_map(|(_, l)| l.class_index()).collect();
    let m = classification_metrics(&p, &l, F1Average::Macro)?;
    Ok((m.accuracy, m.f1))
}

/// Primary metric per fold; `None` for folds where it is undefined.
pub fn per_fold_metrics(task: TaskKind, rows: &[PredictionRow]) -> Result<BTreeMap<usize, Option<f64>>> {
    let mut by_fold: BTreeMap<usize, Vec<&PredictionRow>> = BTreeMap::new();
    for r in rows {
        if let Some(f) = r.fold {
            by_fold.entry(f).or_default().push(r);
        }
    }
    by_fold
        .into_iter()
        .map(|(f, rs)| {
            labelled(&rs)?;
            Ok((f, primary_metric(task, &rs).ok()))
        })
        .collect()
}

/// Point estimates with bootstrap intervals (resampling cases), per-fold
/// primary metrics and, for survival, the median-split log-rank test.
pub fn evaluate_rows(task: TaskKind, rows: &[PredictionRow], n_boot: usize, seed: u64) -> Result<EvalReport> {
    if rows.is_empty() {
        return Err(Error::invalid("predictions", "no rows to evaluate"));
    }
    let refs: Vec<&PredictionRow> = rows.iter().collect();
    let key = |r: &&PredictionRow| r.case_id.clone();
    let mut metrics = vec![bootstrap_ci(
        primary_metric_name(task),
        &refs,
        key,
        |s| primary_metric(task, s),
        n_boot,
        seed,
    )?];
    let mut logrank = None;
    match task {
        TaskKind::Classification { .. } => {
            metrics.push(bootstrap_ci("accuracy", &refs, key, |s| Ok(accuracy_f1(s)?.0), n_boot, seed)?);
            metrics.push(bootstrap_ci("f1_macro", &refs, key, |s| Ok(accuracy_f1(s)?.1), n_boot, seed)?);
        }
        TaskKind::Survival => {
            let mut sorted = refs.clone();
            sorted.sort_by(|a, b| a.case_id.cmp(&b.case_id));
            let data = labelled(&sorted)?;
            let (risks, (times, events)) = survival_columns(&data)?;
            let lr = risk_split_logrank(&risks, &times, &events)?;
            let n_high = lr.high_risk.iter().filter(|&&h| h).count();
            logrank = Some(LogRankSummary {
                median_risk: lr.median,
                n_high,
                n_low: lr.high_risk.len() - n_high,
                chi2: lr.chi2,
                p_value: lr.p_value,
            });
        }
    }
    Ok(EvalReport {
        task,
        n_cases: rows.len(),
        metrics,
        fold_metrics: per_fold_metrics(task, rows)?,
        logrank,
    })
}

/// Rows of two prediction sets paired by case id; the case sets must match.
pub fn pair_rows<'a>(a: &'a [PredictionRow], b: &'a [PredictionRow]) -> Result<Vec<(&'a PredictionRow, &'a PredictionRow)>> {
    let index: BTreeMap<&str, &PredictionRow> = b.iter().map(|r| (r.case_id.as_str(), r)).collect();
    if index.len() != b.len() || a.len() != b.len() {
        return Err(Error::invalid("predictions", "case sets differ"));
    }
    let mut pairs: Vec<_> = a
        .iter()
        .map(|r| {
            index
                .get(r.case_id.as_str())
                .map(|&m| (r, m))
                .ok_or_else(|| Error::UnknownCase(r.case_id.clone()))
        })
        .collect::<Result<_>>()?;
    pairs.sort_by(|x, y| x.0.case_id.cmp(&y.0.case_id));
    Ok(pairs)
}

/// Primary metric of both prediction sets on the same `n_boot` case
/// resamples; resamples where either metric fails are skipped.
pub fn paired_bootstrap_metrics(
    task: TaskKind,
    a: &[PredictionRow],
    b: &[PredictionRow],
    n_boot: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let pairs = pair_rows(a, b)?;
    let n = pairs.len();
    let (mut ma, mut mb) = (Vec::new(), Vec::new());
    for k in 0..n_boot {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let ra: Vec<&PredictionRow> = idx.iter().map(|&i| pairs[i].0).collect();
        let rb: Vec<&PredictionRow> = idx.iter().map(|&i| pairs[i].1).collect();
        if let (Ok(x), Ok(y)) = (primary_metric(task, &ra), primary_metric(task, &rb)) {
            ma.push(x);
            mb.push(y);
        }
    }
    if 2 * ma.len() < n_boot {
        return Err(Error::DegenerateBootstrap {
            degenerate: n_boot - ma.len(),
            total: n_boot,
        });
    }
    Ok((ma, mb))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, fold: usize, p1: f64, class: usize) -> PredictionRow {
        PredictionRow {
            case_id: id.into(),
            fold: Some(fold),
            prediction: Prediction::Classification { probs: vec![1.0 - p1, p1] },
            label: Some(TaskLabel::classification(class, 2).unwrap()),
        }
    }

    fn rows() -> Vec<PredictionRow> {
        (0..40)
            .map(|i| {
                let class = i % 2;
                let p = if class == 1 { 0.6 } else { 0.4 } + ((i * 7) % 5) as f64 * 0.05 - 0.1;
                row(&format!("c{i:02}"), (i / 2) % 4, p, class)
            })
            .collect()
    }

    #[test]
    fn report_is_deterministic_and_order_free() {
        let r = rows();
        let task = TaskKind::Classification { n_classes: 2 };
        let a = evaluate_rows(task, &r, 200, 5).unwrap();
        let mut rev = r.clone();
        rev.reverse();
        assert_eq!(a, evaluate_rows(task, &rev, 200, 5).unwrap());
        assert_eq!(a.fold_metrics.len(), 4);
        let auc = a.metric("auc").unwrap();
        assert!(auc.ci_low <= auc.ci_high);
    }

    #[test]
    fn missing_labels_error() {
        let mut r = rows();
        r[3].label = None;
        assert!(evaluate_rows(TaskKind::Classification { n_classes: 2 }, &r, 10, 0).is_err());
    }

    #[test]
    fn pairing_requires_equal_case_sets() {
        let a = rows();
        let mut b = rows();
        b[0].case_id = "zzz".into();
        assert!(pair_rows(&a, &b).is_err());
        assert!(pair_rows(&a, &a[1..]).is_err());
        assert_eq!(pair_rows(&a, &a).unwrap().len(), 40);
    }
}
