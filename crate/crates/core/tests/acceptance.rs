//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line to
//! stderr (visible even when output is captured) and then asserts.
//!
//! The seeded benchmarks read `configs/cfg_a.toml` and `configs/cfg_b.toml`
//! from the workspace root, the same files the CLI accepts via `--config`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use lupi_core::config::RunConfig;
use lupi_core::datamodel::{load_manifest, CaseRecord, TaskLabel};
use lupi_core::gradsuite::{run_suite, SuiteConfig};
use lupi_core::interpret::{explain_case, top_attention_patches, AttributionReport, DEFAULT_STEPS};
use lupi_core::metrics::{auc, c_index, wilcoxon_one_sided};
use lupi_core::model::{Architecture, ForwardTrace, LupiNetwork, ModelConfig, Network};
use lupi_core::numerics::{Context, Tape};
use lupi_core::synthgen::{generate, generate_cohort, SynthCohort};
use lupi_core::trainer::rundir::PREDICTIONS_FILE;
use lupi_core::trainer::{bind_model_config, evaluate_rows, read_predictions, run_cv, write_run_dir, CvResult, EvalReport, PreparedCase};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(criterion: u32, pass: bool, detail: String) -> bool {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[{verdict}] criterion {criterion}: {detail}");
    pass
}

fn load_config(name: &str) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    RunConfig::load(Some(&path), &[]).unwrap()
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    let reports = run_suite(&SuiteConfig::default()).unwrap();
    let elapsed = start.elapsed();
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    let min_trials = reports.iter().map(|r| r.trials).min().unwrap_or(0);
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let pass = failed.is_empty() && min_trials >= 20 && elapsed < Duration::from_secs(120);
    let ok = report(
        1,
        pass,
        format!(
            "{} cases, >= {min_trials} trials each, worst rel err {worst:.2e}, failed {failed:?}, {:.1}s",
            reports.len(),
            elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- 2

fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1;
                twice += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    twice as f64 / (2 * pairs) as f64
}

fn brute_c_index(risks: &[f64], times: &[f64], events: &[bool]) -> Option<f64> {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for i in 0..risks.len() {
        for j in 0..risks.len() {
            if events[i] && times[i] < times[j] {
                pairs += 1;
                twice += match risks[i].partial_cmp(&risks[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    (pairs > 0).then(|| twice as f64 / (2 * pairs) as f64)
}

/// P(W+ >= observed) by listing all 2^n sign vectors.
fn brute_wilcoxon(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    // doubled mid-ranks: 2·#smaller + #equal + 1
    let ranks: Vec<u64> = abs
        .iter()
        .map(|&x| {
            let below = abs.iter().filter(|&&y| y < x).count() as u64;
            let equal = abs.iter().filter(|&&y| y == x).count() as u64;
            2 * below + equal + 1
        })
        .collect();
    let observed: u64 = ranks.iter().zip(&d).filter(|(_, v)| **v > 0.0).map(|(r, _)| r).sum();
    let n = ranks.len();
    let hits = (0u32..1 << n)
        .filter(|mask| (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum::<u64>() >= observed)
        .count();
    hits as f64 / (1u64 << n) as f64
}

#[test]
fn criterion_2_metric_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = Vec::new();
    for instance in 0..100 {
        let n = rng.random_range(2..=50);
        // a coarse grid forces ties
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 / 4.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let got = auc(&scores, &labels).unwrap();
        if got != brute_auc(&scores, &labels) {
            mismatches.push(format!("auc #{instance}"));
        }
        let times: Vec<f64> = (0..n).map(|_| rng.random_range(1..12) as f64).collect();
        let events: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        match (c_index(&scores, &times, &events).ok(), brute_c_index(&scores, &times, &events)) {
            (Some(a), Some(b)) if a == b => {}
            (None, None) => {}
            _ => mismatches.push(format!("c_index #{instance}")),
        }
    }
    let mut wilcoxon_cases = 0;
    for n in 5..=12 {
        for _ in 0..10 {
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(0..10) as f64 / 10.0).collect();
            // small integer shifts give tied magnitudes; none are zero
            let a: Vec<f64> = b
                .iter()
                .map(|v| {
                    let k = rng.random_range(1..=4) as f64 / 20.0;
                    if rng.random_bool(0.6) { v + k } else { v - k }
                })
                .collect();
            let got = wilcoxon_one_sided(&a, &b).unwrap();
            if (got - brute_wilcoxon(&a, &b)).abs() > 1e-15 {
                mismatches.push(format!("wilcoxon n={n}"));
            }
            wilcoxon_cases += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = mismatches.is_empty() && elapsed < Duration::from_secs(60);
    let ok = report(
        2,
        pass,
        format!(
            "100 AUC/C-index instances, {wilcoxon_cases} Wilcoxon instances (n 5..=12), mismatches {mismatches:?}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- 3

fn small_model(seed: u64) -> (LupiNetwork, SynthCohort, Vec<CaseRecord>) {
    let mut cfg = load_config("cfg_a.toml");
    cfg.synth.n_cases = 12;
    cfg.synth.seed = seed;
    let cohort = generate(&cfg.synth).unwrap();
    let cases = cohort.case_records().unwrap();
    let mut model = cfg.model.clone();
    model.arch = Architecture::Lupi;
    let model = bind_model_config(&model, cases[0].feature_dim(), Some(&cohort.catalog), cohort.config.task()).unwrap();
    (LupiNetwork::new(model, seed).unwrap(), cohort, cases)
}

fn subvectors(cohort: &SynthCohort, case: &CaseRecord) -> Vec<Vec<f64>> {
    PreparedCase::new(case.clone(), Some(&cohort.catalog)).unwrap().subvectors.unwrap()
}

#[test]
fn criterion_3_structural_invariants() {
    let (mut row_err, mut identity_err, mut gap) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..3 {
        let (net, cohort, cases) = small_model(seed);
        for case in &cases {
            let sub = subvectors(&cohort, case);
            let mut ctx = Context::eval();
            let mut tape = Tape::new();
            let (p, d) = net.forward_both(&mut tape, case.features(), &sub, &mut ctx).unwrap();
            let privileged = ForwardTrace::from_tape(&tape, &p);
            let distilled = ForwardTrace::from_tape(&tape, &d);
            row_err = row_err.max(privileged.max_row_sum_error()).max(distilled.max_row_sum_error());

            // distilled path with its queries replaced by Z
            let mut forced_tape = Tape::new();
            let patches = net.re_embed(&mut forced_tape, case.features()).unwrap();
            let z = forced_tape.constant(privileged.pathway_embed.clone());
            let forced = net.shared_branch(&mut forced_tape, patches, z, None, &mut ctx).unwrap();
            let forced = ForwardTrace::from_tape(&forced_tape, &forced);
            let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            identity_err = identity_err
                .max(diff(privileged.attention.as_slice().unwrap(), forced.attention.as_slice().unwrap()))
                .max(diff(privileged.fused.as_slice().unwrap(), forced.fused.as_slice().unwrap()))
                .max(diff(&privileged.pooled, &forced.pooled))
                .max(diff(&privileged.pool_weights, &forced.pool_weights))
                .max(diff(&privileged.logits, &forced.logits));

            let r = explain_case(&Network::Lupi(net.clone()), case, 256).unwrap();
            gap = gap.max(r.completeness_gap);
        }
    }
    let pass = row_err <= 1e-6 && identity_err <= 1e-6 && gap <= 1e-3;
    let ok = report(
        3,
        pass,
        format!("max row-sum err {row_err:.1e}, forced-query trace diff {identity_err:.1e}, IG gap (256 steps) {gap:.1e}"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- 4, 5, 7

struct Benchmark {
    cohort: SynthCohort,
    cases: Vec<CaseRecord>,
    lupi: CvResult,
    lupi_eval: EvalReport,
    abmil_eval: EvalReport,
}

fn cv_with(cfg: &RunConfig, cohort: &SynthCohort, cases: &[CaseRecord], arch: Architecture) -> (CvResult, EvalReport) {
    let model = ModelConfig { arch, ..cfg.model.clone() };
    let cv = run_cv(cases, Some(&cohort.catalog), &model, &cfg.train, cfg.workers).unwrap();
    let eval = evaluate_rows(cv.model.task, &cv.pooled, cfg.eval.n_boot, cfg.seed).unwrap();
    (cv, eval)
}

fn cfg_a() -> &'static Benchmark {
    static CELL: OnceLock<Benchmark> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = load_config("cfg_a.toml");
        let cohort = generate(&cfg.synth).unwrap();
        let cases = cohort.case_records().unwrap();
        let (lupi, lupi_eval) = cv_with(&cfg, &cohort, &cases, Architecture::Lupi);
        let (_, abmil_eval) = cv_with(&cfg, &cohort, &cases, Architecture::Abmil);
        Benchmark {
            cohort,
            cases,
            lupi,
            lupi_eval,
            abmil_eval,
        }
    })
}

fn fold_values(r: &EvalReport) -> Vec<f64> {
    r.fold_metrics.values().map(|v| v.unwrap()).collect()
}

#[test]
fn criterion_4_lupi_beats_abmil() {
    let b = cfg_a();
    let lupi = b.lupi_eval.metric("auc").unwrap().point;
    let abmil = b.abmil_eval.metric("auc").unwrap().point;
    let (fl, fa) = (fold_values(&b.lupi_eval), fold_values(&b.abmil_eval));
    let p = wilcoxon_one_sided(&fl, &fa).unwrap();
    let pass = lupi - abmil >= 0.03 && p <= 0.0625;
    let ok = report(
        4,
        pass,
        format!(
            "pooled out-of-fold AUC {lupi:.4} vs ABMIL {abmil:.4} (gain {:+.4}, need >= 0.03); fold AUCs {fl:.3?} vs {fa:.3?}, Wilcoxon p {p:.4} (need <= 0.0625)",
            lupi - abmil
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_5_alignment_converges() {
    let b = cfg_a();
    let ratios: Vec<f64> = b
        .lupi
        .folds
        .iter()
        .map(|f| {
            let last = f.history.iter().find(|h| h.epoch == 30).unwrap();
            last.loss.alignment() / f.history[0].loss.alignment()
        })
        .collect();
    let pass = ratios.iter().all(|&r| r <= 0.5);
    let ok = report(5, pass, format!("alignment loss epoch 30 / epoch 1 per fold {ratios:.3?} (need all <= 0.5)"));
    assert!(ok);
}

fn sign_test_p(wins: usize, n: usize) -> f64 {
    // P(X >= wins), X ~ Binomial(n, 1/2)
    let mut total = 0.0;
    let mut c = 1.0f64;
    for k in 0..=n {
        if k >= wins {
            total += c;
        }
        c = c * (n - k) as f64 / (k + 1) as f64;
    }
    total / 2f64.powi(n as i32)
}

#[test]
fn criterion_7_attributions_find_the_informative_pathway() {
    let b = cfg_a();
    let informative = b.cohort.config.informative_pathways.clone();
    let by_id: BTreeMap<&str, usize> = b.cases.iter().enumerate().map(|(i, c)| (c.case_id.as_str(), i)).collect();
    let mut correct: Vec<(usize, AttributionReport)> = Vec::new();
    for fold in &b.lupi.folds {
        for id in &fold.val_ids {
            let i = by_id[id.as_str()];
            let r = explain_case(&fold.network, &b.cases[i], DEFAULT_STEPS).unwrap();
            let TaskLabel::Classification { class_index, .. } = b.cases[i].label else { unreachable!() };
            if r.prediction.predicted_class() == Some(class_index) {
                correct.push((i, r));
            }
        }
    }
    let wins = correct
        .iter()
        .filter(|(_, r)| {
            let phi = &r.pathway_shapley;
            let inf = informative.iter().map(|&p| phi[p]).sum::<f64>() / informative.len() as f64;
            let rest: Vec<f64> = (0..phi.len()).filter(|p| !informative.contains(p)).map(|p| phi[p]).collect();
            inf > rest.iter().sum::<f64>() / rest.len() as f64
        })
        .count();
    let p = sign_test_p(wins, correct.len());

    let maps: Vec<(String, Vec<f64>)> =
        correct.iter().map(|(i, r)| (b.cases[*i].case_id.clone(), r.raw_patch_scores.clone())).collect();
    let top = top_attention_patches(&maps, 0.01);
    let origin = |case: &str, j: usize| b.cohort.cases[by_id[case]].patch_pathways[j];
    let top_rate = top.iter().filter(|t| informative.contains(&origin(&t.case_id, t.patch_index))).count() as f64
        / top.len() as f64;
    let (hits, total) = correct.iter().fold((0usize, 0usize), |(h, t), (i, _)| {
        let pp = &b.cohort.cases[*i].patch_pathways;
        (h + pp.iter().filter(|p| informative.contains(p)).count(), t + pp.len())
    });
    let base_rate = hits as f64 / total as f64;

    let pass = correct.len() >= 30 && p < 0.05 && top_rate >= 2.0 * base_rate;
    let ok = report(
        7,
        pass,
        format!(
            "informative Shapley above non-informative mean in {wins}/{} correct cases (sign test p {p:.2e}); top-1% informative share {top_rate:.3} vs base rate {base_rate:.3} ({:.2}x, need >= 2x)",
            correct.len(),
            top_rate / base_rate
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_6_survival_pipeline() {
    let cfg = load_config("cfg_b.toml");
    let cohort = generate(&cfg.synth).unwrap();
    let cases = cohort.case_records().unwrap();
    let (_, eval) = cv_with(&cfg, &cohort, &cases, Architecture::Lupi);
    let c = eval.metric("c_index").unwrap().point;
    let lr = eval.logrank.clone().unwrap();
    let pass = c >= 0.60 && lr.p_value < 0.05;
    let ok = report(
        6,
        pass,
        format!(
            "pooled out-of-fold C-index {c:.4} (need >= 0.60), median risk split {}/{} log-rank p {:.2e} (need < 0.05)",
            lr.n_high, lr.n_low, lr.p_value
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- 8

fn pipeline(dir: &Path, workers: usize) -> (Vec<u8>, Vec<u8>) {
    let mut cfg = load_config("cfg_a.toml");
    cfg.synth.n_cases = 60;
    cfg.train.epochs = 3;
    cfg.workers = workers;
    let manifest = generate_cohort(&cfg.synth, &dir.join("cohort")).unwrap();
    let manifest = load_manifest(&manifest.path).unwrap();
    let catalog = manifest.load_gene_sets().unwrap();
    let cases = manifest.load_cases().unwrap();
    let run = dir.join("run");
    let cv = run_cv(&cases, catalog.as_ref(), &cfg.model, &cfg.train, cfg.workers).unwrap();
    write_run_dir(&run, &cv, serde_json::json!({})).unwrap();
    let (task, rows) = read_predictions(&run.join(PREDICTIONS_FILE)).unwrap();
    let eval = evaluate_rows(task, &rows, cfg.eval.n_boot, cfg.seed).unwrap();
    let metrics = serde_json::to_vec_pretty(&eval).unwrap();
    (std::fs::read(run.join(PREDICTIONS_FILE)).unwrap(), metrics)
}

#[test]
fn criterion_8_determinism() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (pred_a, metrics_a) = pipeline(a.path(), 1);
    let (pred_b, metrics_b) = pipeline(b.path(), 2);
    let pass = pred_a == pred_b && metrics_a == metrics_b;
    let ok = report(
        8,
        pass,
        format!(
            "pooled predictions {} bytes identical: {}; metric report {} bytes identical: {} (worker counts 1 and 2)",
            pred_a.len(),
            pred_a == pred_b,
            metrics_a.len(),
            metrics_a == metrics_b
        ),
    );
    assert!(ok);
}
