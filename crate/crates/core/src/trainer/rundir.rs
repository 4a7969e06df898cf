//! Run-directory layout and the prediction/loss-history CSV files.
//!
//! ```text
//! run/
//!   config.toml              effective configuration (written by the caller)
//!   run.json                 seeds, versions, folds, selection, fold metrics
//!   pooled_predictions.csv   one out-of-fold row per case
//!   fold_<k>/checkpoint.ckpt
//!   fold_<k>/loss_history.csv
//! ```

use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{CvResult, EpochRecord};
use crate::datamodel::{TaskKind, TaskLabel};
use crate::error::{Error, Result};
use crate::model::Prediction;

pub const PREDICTIONS_FILE: &str = "pooled_predictions.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const HISTORY_FILE: &str = "loss_history.csv";
pub const RUN_FILE: &str = "run.json";

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub case_id: String,
    pub fold: Option<usize>,
    pub prediction: Prediction,
    pub label: Option<TaskLabel>,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        path: path.display().to_string(),
        line,
        column: 0,
        message: e.to_string(),
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Classification: `case_id,fold,p_0..p_{C−1},label`.
/// Survival: `case_id,fold,risk,h_0..h_{K−1},time,event`.
pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let Some(first) = rows.first() else {
        return Err(Error::invalid("predictions", "nothing to write"));
    };
    let header: Vec<String> = match &first.prediction {
        Prediction::Classification { probs } => std::iter::once("case_id".to_string())
            .chain(std::iter::once("fold".into()))
            .chain((0..probs.len()).map(|c| format!("p_{c}")))
            .chain(std::iter::once("label".into()))
            .collect(),
        Prediction::Survival { hazards, .. } => ["case_id", "fold", "risk"]
            .into_iter()
            .map(String::from)
            .chain((0..hazards.len()).map(|k| format!("h_{k}")))
            .chain(["time".to_string(), "event".to_string()])
            .collect(),
    };
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        let mut rec = vec![row.case_id.clone(), opt(row.fold)];
        match (&row.prediction, &row.label) {
            (Prediction::Classification { probs }, label) => {
                if probs.len() + 3 != header.len() {
                    return Err(Error::Shape("class counts differ between rows".into()));
                }
                rec.extend(probs.iter().map(f64::to_string));
                rec.push(opt(label.and_then(|l| l.class_index())));
            }
            (Prediction::Survival { hazards, risk }, label) => {
                if hazards.len() + 5 != header.len() {
                    return Err(Error::Shape("bin counts differ between rows".into()));
                }
                rec.push(risk.to_string());
                rec.extend(hazards.iter().map(f64::to_string));
                match label {
                    Some(TaskLabel::Survival { time, event }) => {
                        rec.push(time.to_string());
                        rec.push(u8::from(*event).to_string());
                    }
                    _ => rec.extend([String::new(), String::new()]),
                }
            }
        }
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, name: &str, s: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Parse {
        path: path.display().to_string(),
        line,
        column: 0,
        message: format!("bad {name} value {s:?}"),
    })
}

/// Parses prediction CSV text produced by [`write_predictions`].
pub fn parse_predictions(text: &str, path: &Path) -> Result<(TaskKind, Vec<PredictionRow>)> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = r.headers().map_err(|e| csv_err(path, e))?.iter().map(String::from).collect();
    let bad_header = || Error::Parse {
        path: path.display().to_string(),
        line: 1,
        column: 0,
        message: format!("unrecognised prediction header {header:?}"),
    };
    if header.len() < 4 || header[0] != "case_id" || header[1] != "fold" {
        return Err(bad_header());
    }
    let survival = header[2] == "risk";
    let width = if survival {
        let k = header.len() - 5;
        let ok = k >= 1
            && header[3..3 + k].iter().enumerate().all(|(i, h)| *h == format!("h_{i}"))
            && header[3 + k] == "time"
            && header[4 + k] == "event";
        if !ok {
            return Err(bad_header());
        }
        k
    } else {
        let c = header.len() - 3;
        let ok = c >= 2 && header[2..2 + c].iter().enumerate().all(|(i, h)| *h == format!("p_{i}")) && header[2 + c] == "label";
        if !ok {
            return Err(bad_header());
        }
        c
    };
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = i + 2;
        if rec.len() != header.len() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line,
                column: 0,
                message: format!("{} fields, header has {}", rec.len(), header.len()),
            });
        }
        let case_id = rec[0].to_string();
        if case_id.is_empty() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line,
                column: 0,
                message: "empty case_id".into(),
            });
        }
        let fold = if rec[1].is_empty() {
            None
        } else {
            Some(parse_field(path, line, "fold", &rec[1])?)
        };
        let nums = |range: std::ops::Range<usize>, name: &str| -> Result<Vec<f64>> {
            range
                .map(|j| {
                    let v: f64 = parse_field(path, line, name, &rec[j])?;
                    if v.is_finite() {
                        Ok(v)
                    } else {
                        Err(Error::NonFinite(format!("{} line {line}", path.display())))
                    }
                })
                .collect()
        };
        let row = if survival {
            let risk = nums(2..3, "risk")?[0];
            let hazards = nums(3..3 + width, "hazard")?;
            let (t, e) = (&rec[3 + width], &rec[4 + width]);
            let label = if t.is_empty() && e.is_empty() {
                None
            } else {
                let time: f64 = parse_field(path, line, "time", t)?;
                let event = match e {
                    "1" => true,
                    "0" => false,
                    other => {
                        return Err(Error::Parse {
                            path: path.display().to_string(),
                            line,
                            column: 0,
                            message: format!("bad event value {other:?}"),
                        })
                    }
                };
                Some(TaskLabel::survival(time, event)?)
            };
            PredictionRow {
                case_id,
                fold,
                prediction: Prediction::Survival { hazards, risk },
                label,
            }
        } else {
            let probs = nums(2..2 + width, "probability")?;
            let label = if rec[2 + width].is_empty() {
                None
            } else {
                let c: usize = parse_field(path, line, "label", &rec[2 + width])?;
                Some(TaskLabel::classification(c, width)?)
            };
            PredictionRow {
                case_id,
                fold,
                prediction: Prediction::Classification { probs },
                label,
            }
        };
        rows.push(row);
    }
    let task = if survival {
        TaskKind::Survival
    } else {
        TaskKind::Classification { n_classes: width }
    };
    Ok((task, rows))
}

pub fn read_predictions(path: &Path) -> Result<(TaskKind, Vec<PredictionRow>)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_predictions(&text, path)
}

pub fn write_loss_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["epoch", "sup_priv", "sup_distill", "rec", "attn", "rep", "total", "val_metric"])
        .map_err(|e| csv_err(path, e))?;
    for h in history {
        let mut rec = vec![h.epoch.to_string()];
        rec.extend(h.loss.terms().iter().map(|(_, v)| v.to_string()));
        rec.push(opt(h.val_metric));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn fold_dir(run: &Path, fold: usize) -> PathBuf {
    run.join(format!("fold_{fold}"))
}

#[derive(Serialize)]
struct FoldSummary<'a> {
    fold: usize,
    n_train: usize,
    val_ids: &'a [String],
    selected_epoch: usize,
    val_metric: Option<f64>,
    checkpoint: String,
}

/// Writes checkpoints, loss histories, pooled predictions and `run.json`.
/// `extra` is merged into `run.json` under `"run"`.
pub fn write_run_dir(dir: &Path, cv: &CvResult, extra: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut summaries = Vec::new();
    for f in &cv.folds {
        let fd = fold_dir(dir, f.fold);
        std::fs::create_dir_all(&fd).map_err(|e| Error::io(&fd, e))?;
        f.network.to_checkpoint(&f.meta).save(&fd.join(CHECKPOINT_FILE))?;
        write_loss_history(&fd.join(HISTORY_FILE), &f.history)?;
        summaries.push(FoldSummary {
            fold: f.fold,
            n_train: f.train_ids.len(),
            val_ids: &f.val_ids,
            selected_epoch: f.selected_epoch,
            val_metric: f.val_metric,
            checkpoint: format!("fold_{}/{CHECKPOINT_FILE}", f.fold),
        });
    }
    write_predictions(&dir.join(PREDICTIONS_FILE), &cv.pooled)?;
    let run = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cv.train.seed,
        "model": cv.model,
        "train": cv.train,
        "selection": cv.train.selection,
        "folds": summaries,
        "run": extra,
    });
    let path = dir.join(RUN_FILE);
    let mut text = serde_json::to_string_pretty(&run).expect("run summary serialises");
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Checkpoint paths of a run directory, in fold order.
pub fn run_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut found = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = e.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(k) = name.strip_prefix("fold_").and_then(|k| k.parse::<usize>().ok()) {
            let ckpt = path.join(CHECKPOINT_FILE);
            if ckpt.exists() {
                found.push((k, ckpt));
            }
        }
    }
    found.sort();
    if found.is_empty() {
        return Err(Error::MissingFile(dir.join(format!("fold_0/{CHECKPOINT_FILE}"))));
    }
    Ok(found.into_iter().map(|(_, p)| p).collect())
}
