use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set",
    "synth.feature_dim=6",
    "--set",
    "synth.n_pathways=3",
    "--set",
    "synth.genes_per_pathway=3",
    "--set",
    "synth.patches_min=4",
    "--set",
    "synth.patches_max=8",
];

const TINY_MODEL: &[&str] = &[
    "--set",
    "model.d_z=4",
    "--set",
    "model.d_k=4",
    "--set",
    "model.pathway_hidden=4",
    "--set",
    "model.regions=2",
    "--set",
    "model.abmil_hidden=6",
    "--set",
    "model.abmil_attn=4",
    "--set",
    "train.epochs=2",
    "--set",
    "train.lr_max=0.01",
    "--set",
    "eval.n_boot=100",
    "--set",
    "explain.steps=16",
];

fn lupi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lupi"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = lupi(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, cases: usize, extra: &[&str]) -> PathBuf {
    let out = dir.join("cohort");
    let n = cases.to_string();
    let mut args = vec!["synth", "--out", p(&out), "--cases", &n, "--seed", "5"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ok(&args);
    out
}

fn train(cohort: &Path, run: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--cohort", p(cohort), "--out", p(run), "--seed", "2"];
    args.extend_from_slice(TINY_MODEL);
    args.extend_from_slice(extra);
    lupi(&args)
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn edit_manifest(cohort: &Path, f: impl Fn(&mut serde_json::Value)) {
    let path = cohort.join("manifest.json");
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    f(&mut v);
    fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
}

#[test]
fn synth_is_byte_identical_and_needs_out() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = synth(a.path(), 12, &[]);
    let cb = synth(b.path(), 12, &[]);
    let fa = files(&ca);
    assert_eq!(fa, files(&cb));
    assert!(fa.iter().any(|(n, _)| n == "provenance.json"));
    assert!(fa.iter().any(|(n, _)| n == "manifest.json"));

    let out = lupi(&["synth", "--cases", "5"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = lupi(&["synth", "--out", p(&a.path().join("x")), "--set", "synth.patches_min=0"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn train_writes_five_folds_and_eval_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = synth(dir.path(), 20, &[]);
    let run = dir.path().join("run");
    let out = train(&cohort, &run, &["--workers", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for k in 0..5 {
        assert!(run.join(format!("fold_{k}/checkpoint.ckpt")).exists());
        assert!(run.join(format!("fold_{k}/loss_history.csv")).exists());
    }
    let pooled = fs::read_to_string(run.join("pooled_predictions.csv")).unwrap();
    assert_eq!(pooled.lines().count(), 21);
    assert!(pooled.starts_with("case_id,fold,p_0,p_1,label\n"));
    let snapshot = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(snapshot.contains("seed = 2"));
    assert!(snapshot.contains("epochs = 2"));
    let run_json: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("run.json")).unwrap()).unwrap();
    assert_eq!(run_json["seed"], 2);
    assert!(run_json["version"].is_string());

    // held-out cohort without any expression
    let held = tempfile::tempdir().unwrap();
    let other = {
        let out = held.path().join("cohort");
        let mut args = vec!["synth", "--out", p(&out), "--cases", "16", "--seed", "9"];
        args.extend_from_slice(TINY);
        ok(&args);
        out
    };
    edit_manifest(&other, |v| {
        for c in v["cases"].as_array_mut().unwrap() {
            c.as_object_mut().unwrap().remove("expression");
        }
    });
    fs::remove_dir_all(other.join("expression")).unwrap();
    let ev = dir.path().join("ev");
    ok(&["eval", "--run", p(&run), "--cohort", p(&other), "--out", p(&ev), "--set", "eval.n_boot=100"]);
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    let auc = &metrics["metrics"][0];
    assert_eq!(auc["metric"], "auc");
    assert!(auc["ci_low"].as_f64().unwrap() <= auc["ci_high"].as_f64().unwrap());
    assert_eq!(fs::read_to_string(ev.join("predictions.csv")).unwrap().lines().count(), 17);

    ok(&["eval", "--run", p(&run), "--set", "eval.n_boot=100"]);
    assert!(run.join("metrics.json").exists());
}

#[test]
fn fold_override_and_lambda_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = synth(dir.path(), 3, &["--set", "synth.label_kind=survival"]);
    let run = dir.path().join("run");
    let out = train(&cohort, &run, &["--set", "train.folds=2", "--set", "model.lambda=0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("fold_1/checkpoint.ckpt").exists());
    assert!(!run.join("fold_2").exists());
    let history = fs::read_to_string(run.join("fold_0/loss_history.csv")).unwrap();
    let mut lines = history.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    for line in lines {
        let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap_or(f64::NAN)).collect();
        assert!(v[col("rec")] > 0.0);
        let expected = v[col("sup_priv")] + v[col("sup_distill")];
        assert!((v[col("total")] - expected).abs() < 1e-9, "{line}");
    }
    let pooled = fs::read_to_string(run.join("pooled_predictions.csv")).unwrap();
    assert!(pooled.starts_with("case_id,fold,risk,"));
}

#[test]
fn missing_training_expression_exits_with_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = synth(dir.path(), 10, &[]);
    edit_manifest(&cohort, |v| {
        v["cases"][3].as_object_mut().unwrap().remove("expression");
    });
    let out = train(&cohort, &dir.path().join("run"), &[]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("case_0003"));

    let out = train(&cohort, &dir.path().join("run"), &["--set", "task.kind=survival"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn survival_eval_reports_cindex_and_logrank() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = synth(dir.path(), 20, &["--set", "synth.label_kind=survival"]);
    let run = dir.path().join("run");
    assert!(train(&cohort, &run, &[]).status.success());
    let text = ok(&["eval", "--run", p(&run), "--set", "eval.n_boot=100"]);
    assert!(text.contains("c_index"));
    assert!(text.contains("log-rank"));
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["logrank"]["p_value"].as_f64().is_some());
}

fn write_preds(path: &Path, per_fold_auc_drop: &[usize]) {
    // 5 folds × 4 cases; positives get higher scores unless swapped
    let mut text = String::from("case_id,fold,p_0,p_1,label\n");
    for (fold, &swaps) in per_fold_auc_drop.iter().enumerate() {
        let mut scores = [0.1, 0.2, 0.8, 0.9];
        for s in 0..swaps {
            scores.swap(1 - s.min(1), 2 + s.min(1));
        }
        for (i, s) in scores.iter().enumerate() {
            let label = usize::from(i >= 2);
            text += &format!("c{fold}_{i},{fold},{},{s},{label}\n", 1.0 - s);
        }
    }
    fs::write(path, text).unwrap();
}

#[test]
fn compare_fold_pairing() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let c = dir.path().join("c.csv");
    write_preds(&a, &[0, 0, 0, 0, 0]);
    write_preds(&b, &[1, 2, 1, 2, 1]);
    let report = dir.path().join("cmp.json");
    ok(&["compare", p(&a), p(&b), "--pairing", "fold", "--out", p(&report)]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["p_value"].as_f64().unwrap(), 0.03125);
    assert_eq!(v["n_pairs"], 5);

    let out = lupi(&["compare", p(&a), p(&a)]);
    assert_ne!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("all differences zero"));

    let text = fs::read_to_string(&a).unwrap().replace("c0_0,", "zz,");
    fs::write(&c, text).unwrap();
    assert_eq!(code(&lupi(&["compare", p(&a), p(&c)])), 2);

    ok(&["compare", p(&a), p(&b), "--pairing", "bootstrap", "--set", "eval.n_boot=50"]);
}

#[test]
fn explain_is_deterministic_and_checks_case_ids() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = synth(dir.path(), 20, &[]);
    let run = dir.path().join("run");
    assert!(train(&cohort, &run, &[]).status.success());
    let mut outs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("ex{k}"));
        let mut args = vec!["explain", "--run", p(&run), "--cohort", p(&cohort), "--case", "case_0002", "--case", "case_0007", "--out", p(&out)];
        args.extend_from_slice(TINY_MODEL);
        ok(&args);
        outs.push(files(&out));
    }
    assert_eq!(outs[0], outs[1]);
    let map = String::from_utf8(outs[0].iter().find(|(n, _)| n == "attention_map.csv").unwrap().1.clone()).unwrap();
    assert!(map.starts_with("case_id,slide_id,patch_index,x,y,percentile_score\n"));
    let shap = String::from_utf8(outs[0].iter().find(|(n, _)| n == "shapley.csv").unwrap().1.clone()).unwrap();
    assert_eq!(shap.lines().count(), 1 + 2 * 3 + 3);
    assert!(shap.contains("cohort_mean,PATHWAY_02,"));

    let ck = run.join("fold_1/checkpoint.ckpt");
    let out = dir.path().join("single");
    ok(&["explain", "--checkpoint", p(&ck), "--cohort", p(&cohort), "--case", "case_0001", "--out", p(&out)]);

    let bad = lupi(&["explain", "--run", p(&run), "--cohort", p(&cohort), "--case", "nope", "--out", p(&out)]);
    assert_eq!(code(&bad), 2);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("nope"));
}

#[test]
fn gradcheck_passes_and_detects_fault() {
    let text = ok(&["gradcheck", "--trials", "20"]);
    assert!(text.contains("max_rel_err"));
    assert!(text.contains("loss_survival"));
    assert!(!text.contains("FAIL"));

    let out = lupi(&["gradcheck", "--trials", "2", "--inject-fault"]);
    assert_ne!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().any(|l| l.starts_with("faulty_square") && l.contains("FAIL")));
    assert!(text.lines().any(|l| l.starts_with("matmul") && l.contains("ok")));
}
