//! Cross-validated training, checkpoint selection and ensemble inference.

pub mod evaluate;
pub mod rundir;

use std::collections::{BTreeMap, HashSet};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{partition_expression, CaseRecord, GeneSetCatalog, TaskKind, TaskLabel};
use crate::error::{Error, Result};
use crate::losses::{
    loss_attention_align_log, loss_reconstruction, loss_representation, loss_supervised, survival_bin_edges,
    total_on_tape, LossBreakdown, LossVars,
};
use crate::metrics::{auc, c_index};
use crate::model::{Architecture, CheckpointMeta, LupiNetwork, ModelConfig, Network, Prediction};
use crate::numerics::{adam_step, cosine_lr, AdamConfig, Context, Mat, OptimizerState, Tape};

pub use evaluate::{evaluate_rows, EvalReport};
pub use rundir::{read_predictions, write_predictions, write_run_dir, PredictionRow};

/// Which epoch's parameters a fold keeps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// Epoch with the best validation metric (earliest on ties).
    #[default]
    Best,
    Last,
}

/// Which parameters the alignment losses (`rec`, `attn`, `rep`) update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignScope {
    /// Every parameter on the distilled path, shared ones included.
    All,
    /// Only the distilled-only parameters; shared layers learn from the
    /// supervised losses alone, so the teacher never moves toward the student.
    #[default]
    Student,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Cases per optimizer step; gradients are averaged over the batch.
    pub batch_size: usize,
    pub folds: usize,
    pub seed: u64,
    pub lr_max: f64,
    pub weight_decay: f64,
    pub selection: Selection,
    /// Whether the distilled branch's own supervised loss is trained.
    pub supervise_distilled: bool,
    pub align_scope: AlignScope,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 1,
            folds: 5,
            seed: 0,
            lr_max: 2e-4,
            weight_decay: 1e-5,
            selection: Selection::Best,
            supervise_distilled: true,
            align_scope: AlignScope::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::invalid(format!("train.{field}"), msg));
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.folds < 2 {
            return bad("folds", "must be at least 2");
        }
        if !(self.lr_max >= 0.0 && self.lr_max.is_finite()) {
            return bad("lr_max", "must be a non-negative number");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", "must be a non-negative number");
        }
        Ok(())
    }

    /// Share of the cohort held out per fold.
    pub fn val_fraction(&self) -> f64 {
        1.0 / self.folds as f64
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr_max: self.lr_max,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Patient-level k-fold split. Ids are sorted, then shuffled by `seed`; with
/// `strata`, each stratum is dealt round-robin across folds so every
/// validation fold has a near-equal share of it.
pub fn kfold_split(ids: &[String], strata: Option<&[usize]>, folds: usize, seed: u64) -> Result<Vec<Fold>> {
    if folds < 2 {
        return Err(Error::invalid("folds", "must be at least 2"));
    }
    if ids.len() < folds {
        return Err(Error::invalid("folds", format!("{} cases cannot fill {folds} folds", ids.len())));
    }
    if strata.is_some_and(|s| s.len() != ids.len()) {
        return Err(Error::Shape("strata length differs from case count".into()));
    }
    let unique: HashSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        return Err(Error::invalid("case_ids", "duplicate case id"));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in &order {
        groups.entry(strata.map_or(0, |s| s[i])).or_default().push(i);
    }
    if strata.is_some() {
        for (&class, members) in &groups {
            if members.len() < folds {
                return Err(Error::ClassTooSmall {
                    class,
                    count: members.len(),
                    folds,
                });
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0usize; ids.len()];
    let mut next = 0usize;
    for members in groups.values_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            assignment[i] = next % folds;
            next += 1;
        }
    }
    Ok((0..folds)
        .map(|f| {
            let (val, train): (Vec<usize>, Vec<usize>) = order.iter().partition(|&&i| assignment[i] == f);
            Fold {
                index: f,
                train: train.into_iter().map(|i| ids[i].clone()).collect(),
                val: val.into_iter().map(|i| ids[i].clone()).collect(),
            }
        })
        .collect())
}

/// A case with its pathway subvectors resolved.
#[derive(Clone, Debug)]
pub struct PreparedCase {
    pub record: CaseRecord,
    pub subvectors: Option<Vec<Vec<f64>>>,
}

impl PreparedCase {
    pub fn new(record: CaseRecord, catalog: Option<&GeneSetCatalog>) -> Result<Self> {
        let subvectors = match (&record.expression, catalog) {
            (Some(expr), Some(cat)) => Some(partition_expression(expr, cat)?),
            _ => None,
        };
        Ok(Self { record, subvectors })
    }

    pub fn case_id(&self) -> &str {
        &self.record.case_id
    }
}

/// Fills the cohort-derived fields of `model`.
pub fn bind_model_config(
    model: &ModelConfig,
    feature_dim: usize,
    catalog: Option<&GeneSetCatalog>,
    task: TaskKind,
) -> Result<ModelConfig> {
    let mut cfg = model.clone();
    cfg.d_v = feature_dim;
    cfg.task = task;
    if cfg.arch == Architecture::Lupi {
        let catalog = catalog.ok_or_else(|| Error::invalid("gene_sets", "the dual-branch model needs gene sets"))?;
        cfg.pathway_sizes = catalog.sizes();
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's training cases.
    pub loss: LossBreakdown,
    pub val_metric: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: usize,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub selected_epoch: usize,
    pub val_metric: Option<f64>,
    pub network: Network,
    pub meta: CheckpointMeta,
    /// Validation predictions of the kept parameters, in `val_ids` order.
    pub predictions: Vec<(String, Prediction)>,
}

/// All loss terms of one training case for the dual-branch network.
pub fn lupi_losses(
    net: &LupiNetwork,
    tape: &mut Tape,
    case: &PreparedCase,
    bin_edges: &[f64],
    cfg: &TrainConfig,
    ctx: &mut Context,
) -> Result<LossVars> {
    let subvectors = case
        .subvectors
        .as_ref()
        .ok_or_else(|| Error::MissingExpression(case.case_id().to_string()))?;
    let model = &net.config;
    let (privileged, distilled) = net.forward_both(tape, case.record.features(), subvectors, ctx)?;
    let head_w = tape.param(&net.store, net.head.weight);
    let label = &case.record.label;
    let sup_priv = loss_supervised(tape, privileged.logits, label, bin_edges, Some(head_w), model.l1)?;
    let sup_distill = if cfg.supervise_distilled {
        loss_supervised(tape, distilled.logits, label, bin_edges, Some(head_w), model.l1)?
    } else {
        tape.constant(Array2::zeros((1, 1)))
    };
    let student = match cfg.align_scope {
        AlignScope::All => distilled,
        AlignScope::Student => {
            // second distilled pass in which only distilled-only parameters are live
            tape.freeze(net.shared_params());
            let patches = tape.detach(distilled.patches);
            let vars = net.distilled_from(tape, patches, None, ctx);
            tape.thaw();
            vars?
        }
    };
    let rec = loss_reconstruction(tape, student.queries, privileged.queries)?;
    let attn = loss_attention_align_log(tape, student.log_attention, privileged.attention)?;
    let rep = loss_representation(tape, student.pooled, privileged.pooled)?;
    total_on_tape(tape, sup_priv, sup_distill, rec, attn, rep, model.lambda)
}

/// Supervised loss of the baseline; reported under `sup_distill` since it
/// is the inference path.
fn abmil_losses(
    net: &crate::model::AbmilNetwork,
    tape: &mut Tape,
    case: &PreparedCase,
    bin_edges: &[f64],
    ctx: &mut Context,
) -> Result<LossVars> {
    let out = net.forward(tape, case.record.features(), ctx)?;
    let head_w = tape.param(&net.store, net.head.weight);
    let sup = loss_supervised(tape, out.logits, &case.record.label, bin_edges, Some(head_w), net.config.l1)?;
    let zero = tape.constant(Array2::zeros((1, 1)));
    total_on_tape(tape, zero, sup, zero, zero, zero, 1.0)
}

/// Validation metric used for checkpoint selection: AUC for binary tasks,
/// mean one-vs-rest AUC for multi-class, C-index for survival.
pub fn selection_metric(task: TaskKind, preds: &[(Prediction, TaskLabel)]) -> Option<f64> {
    match task {
        TaskKind::Classification { n_classes } => {
            let probs: Vec<&Vec<f64>> = preds
                .iter()
                .map(|(p, _)| match p {
                    Prediction::Classification { probs } => probs,
                    Prediction::Survival { hazards, .. } => hazards,
                })
                .collect();
            let labels: Vec<usize> = preds.iter().filter_map(|(_, l)| l.class_index()).collect();
            let classes: Vec<usize> = if n_classes == 2 { vec![1] } else { (0..n_classes).collect() };
            let aucs: Vec<f64> = classes
                .iter()
                .filter_map(|&c| {
                    let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
                    let truth: Vec<bool> = labels.iter().map(|&l| l == c).collect();
                    auc(&scores, &truth).ok()
                })
                .collect();
            (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64)
        }
        TaskKind::Survival => {
            let mut risks = Vec::new();
            let mut times = Vec::new();
            let mut events = Vec::new();
            for (p, l) in preds {
                if let (Prediction::Survival { risk, .. }, TaskLabel::Survival { time, event }) = (p, l) {
                    risks.push(*risk);
                    times.push(*time);
                    events.push(*event);
                }
            }
            c_index(&risks, &times, &events).ok()
        }
    }
}

fn predict_all(net: &Network, cases: &[&PreparedCase]) -> Result<Vec<(String, Prediction)>> {
    cases
        .iter()
        .map(|c| Ok((c.case_id().to_string(), net.predict(c.record.features())?)))
        .collect()
}

/// Trains one fold. Cases are visited in a freshly shuffled order every
/// epoch; the learning rate follows a cosine decay over all steps.
pub fn train_fold(
    fold: usize,
    train: &[&PreparedCase],
    val: &[&PreparedCase],
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<FoldResult> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("train", "no training cases"));
    }
    if model.arch == Architecture::Lupi {
        if let Some(c) = train.iter().find(|c| c.subvectors.is_none()) {
            return Err(Error::MissingExpression(c.case_id().to_string()));
        }
    }
    let bin_edges = match model.task {
        TaskKind::Survival => {
            let (times, events): (Vec<f64>, Vec<bool>) = train
                .iter()
                .map(|c| match c.record.label {
                    TaskLabel::Survival { time, event } => (time, event),
                    TaskLabel::Classification { .. } => (f64::NAN, false),
                })
                .unzip();
            survival_bin_edges(&times, &events, model.n_bins)
        }
        TaskKind::Classification { .. } => Vec::new(),
    };

    let model_seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(fold as u64);
    let mut net = Network::new(model.clone(), model_seed)?;
    let mut opt = OptimizerState::new(cfg.adam(), net.store());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(fold as u64 + 1);

    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut kept: Option<(usize, Option<f64>, Network)> = None;
    let labels: Vec<TaskLabel> = val.iter().map(|c| c.record.label).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<Mat>> = None;
            for &i in batch {
                let case = train[i];
                let mut tape = Tape::new();
                let mut ctx = Context::train(rng.clone());
                let vars = match &net {
                    Network::Lupi(n) => lupi_losses(n, &mut tape, case, &bin_edges, cfg, &mut ctx)?,
                    Network::Abmil(n) => abmil_losses(n, &mut tape, case, &bin_edges, &mut ctx)?,
                };
                rng = ctx.into_rng().expect("training context");
                let b = vars.breakdown(&tape);
                if let Some(term) = b.first_non_finite() {
                    return Err(Error::NonFiniteLoss {
                        term,
                        epoch,
                        case_id: case.case_id().to_string(),
                    });
                }
                sum.accumulate(&b);
                tape.backward(vars.total, net.store_mut())?;
                if batch.len() > 1 {
                    let store = net.store();
                    let grads: Vec<Mat> = store.entries().iter().map(|e| e.grad.clone()).collect();
                    match &mut acc {
                        Some(a) => a.iter_mut().zip(&grads).for_each(|(a, g)| *a += g),
                        None => acc = Some(grads),
                    }
                }
            }
            if let Some(acc) = acc {
                let scale = 1.0 / batch.len() as f64;
                let store = net.store_mut();
                let ids: Vec<_> = store.ids().collect();
                for (id, g) in ids.into_iter().zip(acc) {
                    if store.is_trainable(id) {
                        store.grad_mut(id).assign(&(g * scale));
                    }
                }
            }
            let lr = cosine_lr(step, total_steps, cfg.lr_max)?;
            adam_step(net.store_mut(), &mut opt, lr);
            step += 1;
        }
        let mean = sum.scaled(1.0 / train.len() as f64);

        // Evaluate exactly what a checkpoint would hold.
        let mut snapshot = net.clone();
        snapshot.store_mut().round_to_f32();
        let metric = if val.is_empty() {
            None
        } else {
            let preds = predict_all(&snapshot, val)?;
            let pairs: Vec<(Prediction, TaskLabel)> =
                preds.into_iter().map(|(_, p)| p).zip(labels.iter().copied()).collect();
            selection_metric(model.task, &pairs)
        };
        history.push(EpochRecord {
            epoch,
            loss: mean,
            val_metric: metric,
        });
        let better = match (&kept, cfg.selection) {
            (None, _) | (_, Selection::Last) => true,
            (Some((_, best, _)), Selection::Best) => match (metric, best) {
                (Some(m), Some(b)) => m > *b,
                (Some(_), None) => true,
                _ => false,
            },
        };
        if better {
            kept = Some((epoch, metric, snapshot));
        }
    }

    let (selected_epoch, val_metric, network) = kept.expect("at least one epoch");
    let predictions = predict_all(&network, val)?;
    let meta = CheckpointMeta {
        model: model.clone(),
        bin_edges,
        fold: Some(fold),
        epoch: Some(selected_epoch),
        seed: Some(cfg.seed),
    };
    Ok(FoldResult {
        fold,
        train_ids: train.iter().map(|c| c.case_id().to_string()).collect(),
        val_ids: val.iter().map(|c| c.case_id().to_string()).collect(),
        history,
        selected_epoch,
        val_metric,
        network,
        meta,
        predictions,
    })
}

#[derive(Clone, Debug)]
pub struct CvResult {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub splits: Vec<Fold>,
    pub folds: Vec<FoldResult>,
    /// Out-of-fold predictions in case-id order.
    pub pooled: Vec<PredictionRow>,
}

impl CvResult {
    pub fn fold_metrics(&self) -> Vec<Option<f64>> {
        self.folds.iter().map(|f| f.val_metric).collect()
    }
}

/// Runs k-fold cross-validation. Folds train in parallel on at most
/// `workers` threads; results do not depend on the worker count.
pub fn run_cv(
    cases: &[CaseRecord],
    catalog: Option<&GeneSetCatalog>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    workers: usize,
) -> Result<CvResult> {
    cfg.validate()?;
    let Some(first) = cases.first() else {
        return Err(Error::invalid("cases", "empty cohort"));
    };
    let task = match first.label {
        TaskLabel::Classification { n_classes, .. } => TaskKind::Classification { n_classes },
        TaskLabel::Survival { .. } => TaskKind::Survival,
    };
    let model = bind_model_config(model, first.feature_dim(), catalog, task)?;
    if model.arch == Architecture::Lupi {
        if let Some(c) = cases.iter().find(|c| c.expression.is_none()) {
            return Err(Error::MissingExpression(c.case_id.clone()));
        }
    }
    let prepared: Vec<PreparedCase> = cases
        .iter()
        .map(|c| PreparedCase::new(c.clone(), catalog))
        .collect::<Result<_>>()?;
    let ids: Vec<String> = cases.iter().map(|c| c.case_id.clone()).collect();
    let strata: Option<Vec<usize>> = match task {
        TaskKind::Classification { .. } => Some(cases.iter().filter_map(|c| c.label.class_index()).collect()),
        TaskKind::Survival => None,
    };
    let splits = kfold_split(&ids, strata.as_deref(), cfg.folds, cfg.seed)?;
    let by_id: BTreeMap<&str, &PreparedCase> = prepared.iter().map(|c| (c.case_id(), c)).collect();
    let pick = |names: &[String]| names.iter().map(|n| by_id[n.as_str()]).collect::<Vec<_>>();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let folds: Vec<FoldResult> = pool.install(|| {
        splits
            .par_iter()
            .map(|f| train_fold(f.index, &pick(&f.train), &pick(&f.val), &model, cfg))
            .collect::<Result<Vec<_>>>()
    })?;

    let labels: BTreeMap<&str, TaskLabel> = cases.iter().map(|c| (c.case_id.as_str(), c.label)).collect();
    let mut pooled: Vec<PredictionRow> = folds
        .iter()
        .flat_map(|f| {
            f.predictions.iter().map(|(id, p)| PredictionRow {
                case_id: id.clone(),
                fold: Some(f.fold),
                prediction: p.clone(),
                label: Some(labels[id.as_str()]),
            })
        })
        .collect();
    pooled.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    Ok(CvResult {
        model,
        train: cfg.clone(),
        splits,
        folds,
        pooled,
    })
}

/// Mean of the distilled-branch predictions of every network. Never reads
/// expression.
pub fn ensemble_predict(networks: &[Network], features: &Array2<f64>) -> Result<Prediction> {
    if networks.is_empty() {
        return Err(Error::invalid("checkpoints", "no models to ensemble"));
    }
    let preds = networks.iter().map(|n| n.predict(features)).collect::<Result<Vec<_>>>()?;
    Prediction::mean(&preds)
}
