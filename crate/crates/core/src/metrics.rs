//! Evaluation metrics, bootstrap intervals and hypothesis tests.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest sample size for which the Wilcoxon null is computed exactly.
pub const WILCOXON_EXACT_MAX: usize = 25;

/// Mann-Whitney AUC; tied scores across classes count one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    // Doubled average ranks keep every sum an exact integer.
    let ranks = doubled_ranks(scores);
    let pos_rank_sum: u64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(&r, _)| r).sum();
    let n_pos = n_pos as u64;
    let twice_u = pos_rank_sum - n_pos * (n_pos + 1);
    Ok(twice_u as f64 / (2 * n_pos * n_neg as u64) as f64)
}

/// Twice the average 1-based rank of every value.
fn doubled_ranks(values: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0u64; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j, doubled mean = i + 1 + j
        let r = (i + 1 + j) as u64;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum F1Average {
    #[default]
    Macro,
    Micro,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub f1: f64,
}

/// Accuracy and F1 of argmax predictions. Classes absent from both the
/// predictions and the truth are skipped in the macro average.
pub fn classification_metrics(probs: &[Vec<f64>], labels: &[usize], average: F1Average) -> Result<ClassificationMetrics> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", probs.len(), labels.len())));
    }
    let preds: Vec<usize> = probs.iter().map(|p| crate::model::argmax(p)).collect();
    let n_classes = probs
        .iter()
        .map(Vec::len)
        .chain(labels.iter().map(|&l| l + 1))
        .max()
        .unwrap_or(0);
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    let accuracy = correct as f64 / labels.len() as f64;
    let f1 = match average {
        F1Average::Micro => accuracy,
        F1Average::Macro => {
            let mut scores = Vec::new();
            for c in 0..n_classes {
                let tp = preds.iter().zip(labels).filter(|&(&p, &l)| p == c && l == c).count();
                let fp = preds.iter().zip(labels).filter(|&(&p, &l)| p == c && l != c).count();
                let fn_ = preds.iter().zip(labels).filter(|&(&p, &l)| p != c && l == c).count();
                if tp + fp + fn_ == 0 {
                    continue;
                }
                scores.push(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64);
            }
            scores.iter().sum::<f64>() / scores.len() as f64
        }
    };
    Ok(ClassificationMetrics { accuracy, f1 })
}

/// Fenwick tree over counts.
struct Fenwick(Vec<u64>);

impl Fenwick {
    fn new(n: usize) -> Self {
        Self(vec![0; n + 1])
    }

    fn add(&mut self, i: usize) {
        let mut i = i + 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted indices `< i`.
    fn prefix(&self, i: usize) -> u64 {
        let mut i = i;
        let mut s = 0;
        while i > 0 {
            s += self.0[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Harrell's concordance index. A pair `(i, j)` is comparable when
/// `t_i < t_j` and `i` had the event; it is concordant when `risk_i > risk_j`
/// and tied risks count one half.
pub fn c_index(risks: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    let n = risks.len();
    if times.len() != n || events.len() != n {
        return Err(Error::Shape("risks, times and events differ in length".into()));
    }
    // compress risks to ranks
    let mut sorted: Vec<f64> = risks.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let rank = |r: f64| sorted.partition_point(|&v| v.total_cmp(&r) == Ordering::Less);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));
    let mut tree = Fenwick::new(sorted.len());
    let mut inserted = 0u64;
    let (mut concordant, mut tied, mut comparable) = (0u64, 0u64, 0u64);
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && times[order[j]] == times[order[i]] {
            j += 1;
        }
        // everything in the tree has a strictly later time
        for &k in &order[i..j] {
            if events[k] {
                let r = rank(risks[k]);
                let below = tree.prefix(r);
                let at_or_below = tree.prefix(r + 1);
                concordant += below;
                tied += at_or_below - below;
                comparable += inserted;
            }
        }
        for &k in &order[i..j] {
            tree.add(rank(risks[k]));
            inserted += 1;
        }
        i = j;
    }
    if comparable == 0 {
        return Err(Error::NoComparablePairs);
    }
    Ok((2 * concordant + tied) as f64 / (2 * comparable) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    /// Metric on the full data.
    pub point: f64,
    /// Mean over the non-degenerate resamples.
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_boot: usize,
    pub n_degenerate: usize,
    pub seed: u64,
}

/// Metric values on `n_boot` resamples (with replacement) of `items`, or
/// `None` where the metric failed. Items are put in `key` order first, so the
/// result does not depend on the caller's ordering.
pub fn bootstrap_values<T, K, F>(items: &[T], key: impl Fn(&T) -> K, metric: F, n_boot: usize, seed: u64) -> Vec<Option<f64>>
where
    T: Clone + Sync,
    K: Ord,
    F: Fn(&[T]) -> Result<f64> + Sync,
{
    let mut sorted: Vec<T> = items.to_vec();
    sorted.sort_by_key(|t| key(t));
    let n = sorted.len();
    (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let sample: Vec<T> = (0..n).map(|_| sorted[rng.random_range(0..n)].clone()).collect();
            metric(&sample).ok().filter(|v| v.is_finite())
        })
        .collect()
}

/// Linear-interpolated percentile `q ∈ [0, 1]` of sorted values.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Bootstrap mean with 2.5/97.5 percentile bounds.
pub fn bootstrap_ci<T, K, F>(
    name: &str,
    items: &[T],
    key: impl Fn(&T) -> K,
    metric: F,
    n_boot: usize,
    seed: u64,
) -> Result<MetricReport>
where
    T: Clone + Sync,
    K: Ord,
    F: Fn(&[T]) -> Result<f64> + Sync,
{
    let mut sorted: Vec<T> = items.to_vec();
    sorted.sort_by_key(|t| key(t));
    let point = metric(&sorted)?;
    let values = bootstrap_values(&sorted, &key, &metric, n_boot, seed);
    let mut ok: Vec<f64> = values.iter().flatten().copied().collect();
    let n_degenerate = n_boot - ok.len();
    if ok.is_empty() || 2 * n_degenerate > n_boot {
        return Err(Error::DegenerateBootstrap {
            degenerate: n_degenerate,
            total: n_boot,
        });
    }
    ok.sort_by(f64::total_cmp);
    let mean = ok.iter().sum::<f64>() / ok.len() as f64;
    Ok(MetricReport {
        metric: name.to_string(),
        point,
        mean: mean.clamp(ok[0], ok[ok.len() - 1]),
        ci_low: percentile(&ok, 0.025),
        ci_high: percentile(&ok, 0.975),
        n_boot,
        n_degenerate,
        seed,
    })
}

/// One-sided Wilcoxon signed-rank p-value for `a > b`. Zero differences are
/// dropped; ties share average ranks. Exact for up to
/// [`WILCOXON_EXACT_MAX`] pairs, normal approximation with tie correction
/// beyond.
pub fn wilcoxon_one_sided(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} paired values", a.len(), b.len())));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Err(Error::AllDifferencesZero);
    }
    let n = diffs.len();
    if n < 5 {
        return Err(Error::TooFewPairs { needed: 5, got: n });
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = doubled_ranks(&abs);
    let observed: u64 = ranks.iter().zip(&diffs).filter(|(_, &d)| d > 0.0).map(|(&r, _)| r).sum();
    if n <= WILCOXON_EXACT_MAX {
        Ok(exact_upper_tail(&ranks, observed))
    } else {
        Ok(normal_upper_tail(&abs, observed as f64 / 2.0))
    }
}

/// `P(W⁺ ≥ observed)` when each (doubled) rank is positive with
/// probability one half.
fn exact_upper_tail(ranks: &[u64], observed: u64) -> f64 {
    let total: u64 = ranks.iter().sum();
    let mut counts = vec![0f64; total as usize + 1];
    counts[0] = 1.0;
    let mut reach = 0usize;
    for &r in ranks {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] > 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let tail: f64 = counts[observed as usize..].iter().sum();
    tail / 2f64.powi(ranks.len() as i32)
}

fn normal_upper_tail(abs: &[f64], w: f64) -> f64 {
    let n = abs.len() as f64;
    let mut sorted = abs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let mean = n * (n + 1.0) / 4.0;
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 0.5;
    }
    let z = (w - mean - 0.5) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    1.0 - normal.cdf(z)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRankResult {
    /// `true` for the high-risk group.
    pub high_risk: Vec<bool>,
    pub median: f64,
    pub chi2: f64,
    pub p_value: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Splits at the median risk (ties go to the low-risk group) and compares
/// the groups with the two-sample log-rank test.
pub fn risk_split_logrank(risks: &[f64], times: &[f64], events: &[bool]) -> Result<LogRankResult> {
    let n = risks.len();
    if times.len() != n || events.len() != n {
        return Err(Error::Shape("risks, times and events differ in length".into()));
    }
    if n == 0 {
        return Err(Error::DegenerateGroup("empty cohort".into()));
    }
    let m = median(risks);
    let high: Vec<bool> = risks.iter().map(|&r| r > m).collect();
    let n_high = high.iter().filter(|&&h| h).count();
    if n_high < 2 || n - n_high < 2 {
        return Err(Error::DegenerateGroup(format!(
            "median split gives {n_high} high-risk and {} low-risk cases",
            n - n_high
        )));
    }
    let (chi2, p_value) = logrank(&high, times, events);
    Ok(LogRankResult {
        high_risk: high,
        median: m,
        chi2,
        p_value,
    })
}

/// Two-group log-rank statistic and its χ²₁ upper-tail p-value.
pub fn logrank(group: &[bool], times: &[f64], events: &[bool]) -> (f64, f64) {
    let mut event_times: Vec<f64> = times.iter().zip(events).filter(|(_, &e)| e).map(|(&t, _)| t).collect();
    event_times.sort_by(f64::total_cmp);
    event_times.dedup();
    let (mut o_minus_e, mut var) = (0.0, 0.0);
    for &t in &event_times {
        let (mut n_all, mut n1, mut d_all, mut d1) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..times.len() {
            if times[i] >= t {
                n_all += 1.0;
                if group[i] {
                    n1 += 1.0;
                }
                if times[i] == t && events[i] {
                    d_all += 1.0;
                    if group[i] {
                        d1 += 1.0;
                    }
                }
            }
        }
        o_minus_e += d1 - d_all * n1 / n_all;
        if n_all > 1.0 {
            var += d_all * (n1 / n_all) * (1.0 - n1 / n_all) * (n_all - d_all) / (n_all - 1.0);
        }
    }
    if var <= 0.0 {
        return (0.0, 1.0);
    }
    let chi2 = o_minus_e * o_minus_e / var;
    let dist = ChiSquared::new(1.0).expect("one degree of freedom");
    (chi2, 1.0 - dist.cdf(chi2))
}
