use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context as _, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use lupi_core::config::RunConfig;
use lupi_core::datamodel::{load_manifest, CaseRecord, CohortManifest};
use lupi_core::gradsuite::{run_suite, SuiteConfig};
use lupi_core::interpret::{explain_case, write_attention_map, write_reports, write_shapley};
use lupi_core::metrics::wilcoxon_one_sided;
use lupi_core::model::Network;
use lupi_core::trainer::evaluate::{paired_bootstrap_metrics, per_fold_metrics, primary_metric_name};
use lupi_core::trainer::rundir::{run_checkpoints, PREDICTIONS_FILE};
use lupi_core::trainer::{ensemble_predict, evaluate_rows, read_predictions, run_cv, write_predictions, write_run_dir, PredictionRow};
use lupi_core::Error;

const CONFIG_SNAPSHOT: &str = "config.toml";
const METRICS_FILE: &str = "metrics.json";

#[derive(Parser)]
#[command(name = "lupi", version, about = "Privileged-information training for bag-of-patch slide models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted override such as `train.folds=2`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Threads used for fold-level parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cases: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Cross-validated training; writes a run directory.
    Train {
        /// Manifest file or cohort directory.
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Metrics with bootstrap intervals. With `--cohort`, predicts that cohort
    /// with the run's fold ensemble; otherwise evaluates the run's pooled
    /// out-of-fold predictions.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        cohort: Option<PathBuf>,
        /// Output directory; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// One-sided Wilcoxon test that predictions A beat predictions B.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, value_enum, default_value_t = Pairing::Fold)]
        pairing: Pairing,
        /// Writes the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Attention maps and pathway attributions for cases of a cohort.
    Explain {
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        run: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        cohort: Option<PathBuf>,
        /// Case to explain; repeatable. Defaults to every case.
        #[arg(long = "case")]
        cases: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every op and loss.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// Adds an op with a wrong backward rule.
        #[arg(long)]
        inject_fault: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Pairing {
    /// Per-fold primary metrics paired by fold index.
    Fold,
    /// Primary metrics on shared case resamples.
    Bootstrap,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Check(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let usage = e.chain().any(|c| {
            matches!(
                c.downcast_ref::<Error>(),
                Some(Error::Config(_) | Error::UnknownCase(_))
            )
        });
        if usage {
            Failure::Usage(e)
        } else {
            Failure::Data(e)
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::new(e).into()
    }
}

fn usage(e: anyhow::Error) -> Failure {
    Failure::Usage(e)
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(common.config.as_deref(), &common.set).map_err(|e| usage(e.into()))?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    cfg.validate().map_err(|e| usage(e.into()))?;
    Ok(cfg)
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("manifest.json")
    } else {
        p.to_path_buf()
    }
}

fn open_cohort(arg: Option<&PathBuf>, cfg: &RunConfig) -> Result<CohortManifest, Failure> {
    let path = arg
        .or(cfg.paths.cohort.as_ref())
        .ok_or_else(|| usage(anyhow!("no cohort given (--cohort or paths.cohort)")))?;
    let manifest_file = manifest_path(path);
    let m = load_manifest(&manifest_file).with_context(|| format!("loading cohort {}", manifest_file.display()))?;
    cfg.task.check(m.task).map_err(|e| usage(e.into()))?;
    Ok(m)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn cmd_synth(out: &Path, cases: Option<usize>, common: &Common) -> Result<(), Failure> {
    let mut cfg = load_config(common)?;
    if let Some(n) = cases {
        cfg.synth.n_cases = n;
    }
    cfg.synth.validate().map_err(|e| usage(e.into()))?;
    let m = lupi_core::synthgen::generate_cohort(&cfg.synth, out)
        .with_context(|| format!("writing cohort to {}", out.display()))?;
    info!("wrote {} cases to {}", m.cases.len(), out.display());
    println!("{}", m.path.display());
    Ok(())
}

fn cmd_train(cohort: Option<&PathBuf>, out: Option<&PathBuf>, common: &Common) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let out = out
        .or(cfg.paths.out.as_ref())
        .ok_or_else(|| usage(anyhow!("no output directory given (--out or paths.out)")))?
        .clone();
    let manifest = open_cohort(cohort, &cfg)?;
    let catalog = manifest.load_gene_sets()?;
    let cases = manifest.load_cases()?;
    info!("training on {} cases, {} folds", cases.len(), cfg.train.folds);
    let cv = run_cv(&cases, catalog.as_ref(), &cfg.model, &cfg.train, cfg.workers)?;
    let extra = serde_json::json!({
        "cohort": manifest.path.display().to_string(),
        "n_cases": cases.len(),
        "workers": cfg.workers,
    });
    write_run_dir(&out, &cv, extra)?;
    write_text(&out.join(CONFIG_SNAPSHOT), &cfg.to_toml())?;
    for (f, m) in cv.fold_metrics().iter().enumerate() {
        let shown = m.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        println!("fold {f}: selected epoch {} val {shown}", cv.folds[f].selected_epoch);
    }
    println!("{}", out.display());
    Ok(())
}

fn cmd_eval(run: &Path, cohort: Option<&PathBuf>, out: Option<&PathBuf>, common: &Common) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let out = out.cloned().unwrap_or_else(|| run.to_path_buf());
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let (task, rows) = match cohort {
        Some(c) => {
            let manifest = open_cohort(Some(c), &cfg)?;
            let networks = load_networks(run)?;
            let cases = manifest.load_cases_features()?;
            let rows = cases
                .iter()
                .map(|c| {
                    Ok(PredictionRow {
                        case_id: c.case_id.clone(),
                        fold: None,
                        prediction: ensemble_predict(&networks, c.features())?,
                        label: Some(c.label),
                    })
                })
                .collect::<lupi_core::Result<Vec<_>>>()?;
            write_predictions(&out.join("predictions.csv"), &rows)?;
            (manifest.task, rows)
        }
        None => read_predictions(&run.join(PREDICTIONS_FILE))?,
    };
    let report = evaluate_rows(task, &rows, cfg.eval.n_boot, cfg.seed)?;
    write_json(&out.join(METRICS_FILE), &report)?;
    for m in &report.metrics {
        println!(
            "{}: {:.4} (95% CI {:.4}-{:.4}, n_boot={})",
            m.metric, m.point, m.ci_low, m.ci_high, m.n_boot
        );
    }
    if let Some(lr) = &report.logrank {
        println!("log-rank (median split): chi2={:.4} p={:.4e}", lr.chi2, lr.p_value);
    }
    Ok(())
}

fn load_networks(run: &Path) -> Result<Vec<Network>> {
    run_checkpoints(run)?
        .iter()
        .map(|p| Ok(Network::load(p).with_context(|| format!("loading {}", p.display()))?.0))
        .collect()
}

#[derive(serde::Serialize)]
struct CompareReport {
    pairing: &'static str,
    metric: &'static str,
    n_pairs: usize,
    mean_a: f64,
    mean_b: f64,
    /// One-sided p-value for A > B.
    p_value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    per_fold: Option<Vec<(usize, f64, f64)>>,
}

fn cmd_compare(a: &Path, b: &Path, pairing: Pairing, out: Option<&PathBuf>, common: &Common) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let (task_a, rows_a) = read_predictions(a)?;
    let (task_b, rows_b) = read_predictions(b)?;
    if task_a != task_b {
        return Err(usage(anyhow!("prediction files are for different tasks")));
    }
    let ids = |rows: &[PredictionRow]| rows.iter().map(|r| r.case_id.clone()).collect::<std::collections::BTreeSet<_>>();
    if ids(&rows_a) != ids(&rows_b) || rows_a.len() != rows_b.len() {
        return Err(usage(anyhow!("prediction files cover different case sets")));
    }
    let (xa, xb, per_fold) = match pairing {
        Pairing::Fold => {
            let fa = per_fold_metrics(task_a, &rows_a)?;
            let fb = per_fold_metrics(task_b, &rows_b)?;
            if fa.is_empty() || fa.keys().ne(fb.keys()) {
                return Err(usage(anyhow!("fold pairing needs matching fold columns in both files")));
            }
            let joined: Vec<(usize, f64, f64)> = fa
                .iter()
                .map(|(&k, &x)| match (x, fb[&k]) {
                    (Some(x), Some(y)) => Ok((k, x, y)),
                    _ => Err(anyhow!("fold {k}: primary metric undefined")),
                })
                .collect::<Result<_>>()?;
            let xa = joined.iter().map(|j| j.1).collect::<Vec<_>>();
            let xb = joined.iter().map(|j| j.2).collect::<Vec<_>>();
            (xa, xb, Some(joined))
        }
        Pairing::Bootstrap => {
            let (xa, xb) = paired_bootstrap_metrics(task_a, &rows_a, &rows_b, cfg.eval.n_boot, cfg.seed)?;
            (xa, xb, None)
        }
    };
    let p = wilcoxon_one_sided(&xa, &xb)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let report = CompareReport {
        pairing: match pairing {
            Pairing::Fold => "fold",
            Pairing::Bootstrap => "bootstrap",
        },
        metric: primary_metric_name(task_a),
        n_pairs: xa.len(),
        mean_a: mean(&xa),
        mean_b: mean(&xb),
        p_value: p,
        per_fold,
    };
    println!(
        "{} A={:.4} B={:.4} over {} {} pairs; one-sided Wilcoxon p={:.6}",
        report.metric, report.mean_a, report.mean_b, report.n_pairs, report.pairing, p
    );
    if let Some(o) = out {
        write_json(o, &report)?;
    }
    Ok(())
}

/// Fold that held each case out, from the run's pooled predictions.
fn out_of_fold(run: &Path) -> BTreeMap<String, usize> {
    read_predictions(&run.join(PREDICTIONS_FILE))
        .map(|(_, rows)| rows.into_iter().filter_map(|r| Some((r.case_id, r.fold?))).collect())
        .unwrap_or_default()
}

fn cmd_explain(
    run: Option<&PathBuf>,
    checkpoint: Option<&PathBuf>,
    cohort: Option<&PathBuf>,
    wanted: &[String],
    out: &Path,
    common: &Common,
) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let manifest = open_cohort(cohort, &cfg)?;
    let entries: Vec<_> = if wanted.is_empty() {
        manifest.cases.iter().collect()
    } else {
        wanted
            .iter()
            .map(|id| {
                manifest
                    .cases
                    .iter()
                    .find(|c| &c.case_id == id)
                    .ok_or_else(|| Error::UnknownCase(id.clone()))
            })
            .collect::<lupi_core::Result<_>>()?
    };
    let cases: Vec<CaseRecord> = entries
        .iter()
        .map(|e| manifest.load_case_features(e))
        .collect::<lupi_core::Result<_>>()?;
    // each case is explained by the model that did not train on it
    let (networks, pick): (Vec<Network>, Vec<usize>) = match (run, checkpoint) {
        (Some(run), _) => {
            let nets = load_networks(run)?;
            let oof = out_of_fold(run);
            let pick = cases
                .iter()
                .map(|c| oof.get(&c.case_id).copied().filter(|&k| k < nets.len()).unwrap_or(0))
                .collect();
            (nets, pick)
        }
        (None, Some(ck)) => (vec![Network::load(ck)?.0], vec![0; cases.len()]),
        (None, None) => return Err(usage(anyhow!("give --run or --checkpoint"))),
    };
    let reports = cases
        .iter()
        .zip(&pick)
        .map(|(c, &k)| explain_case(&networks[k], c, cfg.explain.steps))
        .collect::<lupi_core::Result<Vec<_>>>()?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_attention_map(&out.join("attention_map.csv"), &reports, &cases)?;
    let catalog = manifest.load_gene_sets()?;
    let names: Vec<String> = match &catalog {
        Some(c) => c.names().into_iter().map(String::from).collect(),
        None => (0..reports.first().map_or(0, |r| r.pathway_shapley.len()))
            .map(|p| format!("pathway_{p}"))
            .collect(),
    };
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    write_shapley(&out.join("shapley.csv"), &reports, &names)?;
    write_reports(&out.join("reports.jsonl"), &reports)?;
    for r in &reports {
        println!(
            "{}: score {:.4}, completeness gap {:.2e}",
            r.case_id,
            r.prediction.score(),
            r.completeness_gap
        );
    }
    Ok(())
}

fn cmd_gradcheck(trials: usize, inject_fault: bool, out: Option<&PathBuf>, common: &Common) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let suite = SuiteConfig {
        trials,
        seed: cfg.seed,
        inject_fault,
        ..SuiteConfig::default()
    };
    let reports = run_suite(&suite)?;
    println!("{:<22} {:>7} {:>8} {:>12}  worst", "op", "trials", "entries", "max_rel_err");
    for r in &reports {
        println!(
            "{:<22} {:>7} {:>8} {:>12.3e}  {} {}",
            r.name,
            r.trials,
            r.entries,
            r.max_rel_error,
            if r.passed { "ok  " } else { "FAIL" },
            r.worst
        );
    }
    if let Some(o) = out {
        write_json(o, &reports)?;
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient check failed for: {}", failed.join(", "))))
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Synth { out, cases, common } => cmd_synth(out, *cases, common),
        Command::Train { cohort, out, common } => cmd_train(cohort.as_ref(), out.as_ref(), common),
        Command::Eval {
            run,
            cohort,
            out,
            common,
        } => cmd_eval(run, cohort.as_ref(), out.as_ref(), common),
        Command::Compare {
            a,
            b,
            pairing,
            out,
            common,
        } => cmd_compare(a, b, *pairing, out.as_ref(), common),
        Command::Explain {
            run,
            checkpoint,
            cohort,
            cases,
            out,
            common,
        } => cmd_explain(run.as_ref(), checkpoint.as_ref(), cohort.as_ref(), cases, out, common),
        Command::Gradcheck {
            trials,
            inject_fault,
            out,
            common,
        } => {
            if *trials == 0 {
                return Err(usage(anyhow!("--trials must be at least 1")));
            }
            cmd_gradcheck(*trials, *inject_fault, out.as_ref(), common)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
    }
}
