//! Cohort manifests: a JSON document listing one entry per slide. Entries
//! sharing a `case_id` are grouped into one case whose patch rows are the
//! concatenation of all its slides.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::bag::{decode_feature_header, load_patch_bag};
use super::expression::ExpressionProfile;
use super::genesets::{load_gene_sets, GeneSetCatalog};
use super::{CaseRecord, TaskKind, TaskLabel};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TaskSpec {
    Classification { n_classes: usize },
    Survival,
}

impl TaskSpec {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskSpec::Classification { n_classes } => TaskKind::Classification {
                n_classes: *n_classes,
            },
            TaskSpec::Survival => TaskKind::Survival,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelSpec {
    Class { class: usize },
    Survival { time: f64, event: bool },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideEntry {
    pub case_id: String,
    pub slide_id: String,
    pub features: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expression: Option<String>,
    pub label: LabelSpec,
}

/// The on-disk manifest document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    pub feature_dim: usize,
    pub gene_universe: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gene_sets: Option<String>,
    pub task: TaskSpec,
    pub cases: Vec<SlideEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlideRef {
    pub slide_id: String,
    pub features: PathBuf,
}

/// One case of a validated manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseEntry {
    pub case_id: String,
    pub slides: Vec<SlideRef>,
    pub expression: Option<PathBuf>,
    pub label: TaskLabel,
}

/// A validated manifest with slides grouped per case and paths resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct CohortManifest {
    pub path: PathBuf,
    pub file: ManifestFile,
    pub feature_dim: usize,
    pub gene_universe: Vec<String>,
    pub gene_sets: Option<PathBuf>,
    pub task: TaskKind,
    pub cases: Vec<CaseEntry>,
}

fn label_from_spec(spec: &LabelSpec, task: &TaskSpec, case_id: &str) -> Result<TaskLabel> {
    let field = format!("label of case {case_id}");
    match (spec, task) {
        (LabelSpec::Class { class }, TaskSpec::Classification { n_classes }) => {
            TaskLabel::classification(*class, *n_classes).map_err(|e| Error::invalid(field, e.to_string()))
        }
        (LabelSpec::Survival { time, event }, TaskSpec::Survival) => {
            TaskLabel::survival(*time, *event).map_err(|e| Error::invalid(field, e.to_string()))
        }
        _ => Err(Error::invalid(field, "label kind does not match the task")),
    }
}

impl CohortManifest {
    /// Validates a parsed document; `base` is the directory relative paths
    /// resolve against.
    pub fn from_file(file: ManifestFile, path: PathBuf, base: &Path) -> Result<Self> {
        if file.feature_dim == 0 {
            return Err(Error::invalid("feature_dim", "must be positive"));
        }
        if let TaskSpec::Classification { n_classes } = file.task {
            if n_classes < 2 {
                return Err(Error::invalid("task.n_classes", "need at least two classes"));
            }
        }
        let mut seen_genes = std::collections::HashSet::new();
        for g in &file.gene_universe {
            if !seen_genes.insert(g.as_str()) {
                return Err(Error::invalid("gene_universe", format!("duplicate gene {g}")));
            }
        }

        let mut order: Vec<String> = Vec::new();
        let mut grouped: HashMap<String, CaseEntry> = HashMap::new();
        for entry in &file.cases {
            if entry.case_id.is_empty() || entry.slide_id.is_empty() {
                return Err(Error::invalid("cases", "empty case_id or slide_id"));
            }
            let label = label_from_spec(&entry.label, &file.task, &entry.case_id)?;
            let expression = entry.expression.as_ref().map(|p| base.join(p));
            let slide = SlideRef {
                slide_id: entry.slide_id.clone(),
                features: base.join(&entry.features),
            };
            match grouped.get_mut(&entry.case_id) {
                Some(case) => {
                    if case.slides.iter().any(|s| s.slide_id == entry.slide_id) {
                        return Err(Error::DuplicateCase {
                            case_id: entry.case_id.clone(),
                            slide_id: entry.slide_id.clone(),
                        });
                    }
                    if case.label != label {
                        return Err(Error::invalid(
                            format!("label of case {}", entry.case_id),
                            "slides of one case disagree",
                        ));
                    }
                    match (&case.expression, &expression) {
                        (Some(a), Some(b)) if a != b => {
                            return Err(Error::invalid(
                                format!("expression of case {}", entry.case_id),
                                "slides of one case reference different profiles",
                            ))
                        }
                        (None, Some(_)) => case.expression = expression,
                        _ => {}
                    }
                    case.slides.push(slide);
                }
                None => {
                    order.push(entry.case_id.clone());
                    grouped.insert(
                        entry.case_id.clone(),
                        CaseEntry {
                            case_id: entry.case_id.clone(),
                            slides: vec![slide],
                            expression,
                            label,
                        },
                    );
                }
            }
        }
        let cases: Vec<CaseEntry> = order
            .into_iter()
            .map(|id| grouped.remove(&id).expect("grouped"))
            .collect();

        for case in &cases {
            for slide in &case.slides {
                check_feature_file(&slide.features, file.feature_dim)?;
            }
            if let Some(p) = &case.expression {
                let profile = ExpressionProfile::load(p)?;
                if profile.gene_names != file.gene_universe {
                    return Err(Error::invalid(
                        format!("expression of case {}", case.case_id),
                        "gene names differ from the manifest's gene universe",
                    ));
                }
            }
        }
        let gene_sets = file.gene_sets.as_ref().map(|p| base.join(p));
        if let Some(p) = &gene_sets {
            if !p.exists() {
                return Err(Error::MissingFile(p.clone()));
            }
        }

        Ok(Self {
            path,
            feature_dim: file.feature_dim,
            gene_universe: file.gene_universe.clone(),
            gene_sets,
            task: file.task.kind(),
            cases,
            file,
        })
    }

    pub fn case_ids(&self) -> Vec<&str> {
        self.cases.iter().map(|c| c.case_id.as_str()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_manifest_file(&self.file, path)
    }

    pub fn load_gene_sets(&self) -> Result<Option<GeneSetCatalog>> {
        self.gene_sets
            .as_ref()
            .map(|p| load_gene_sets(p, &self.gene_universe))
            .transpose()
    }

    /// Loads every case's bags (concatenated per case) and expression.
    pub fn load_cases(&self) -> Result<Vec<CaseRecord>> {
        self.cases.iter().map(|c| self.load_case(c)).collect()
    }

    /// Loads every case's bags only; expression files are never opened.
    pub fn load_cases_features(&self) -> Result<Vec<CaseRecord>> {
        self.cases.iter().map(|c| self.load_case_features(c)).collect()
    }

    pub fn load_case_features(&self, entry: &CaseEntry) -> Result<CaseRecord> {
        let bags = entry
            .slides
            .iter()
            .map(|s| load_patch_bag(&s.features, &entry.case_id, &s.slide_id))
            .collect::<Result<Vec<_>>>()?;
        CaseRecord::new(entry.case_id.clone(), bags, None, entry.label)
    }

    pub fn load_case(&self, entry: &CaseEntry) -> Result<CaseRecord> {
        let bags = entry
            .slides
            .iter()
            .map(|s| load_patch_bag(&s.features, &entry.case_id, &s.slide_id))
            .collect::<Result<Vec<_>>>()?;
        let expression = entry.expression.as_deref().map(ExpressionProfile::load).transpose()?;
        CaseRecord::new(entry.case_id.clone(), bags, expression, entry.label)
    }
}

fn check_feature_file(path: &Path, feature_dim: usize) -> Result<()> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (n, dim) = decode_feature_header(&bytes)?;
    if dim != feature_dim {
        return Err(Error::Shape(format!(
            "{}: feature dim {dim}, manifest declares {feature_dim}",
            path.display()
        )));
    }
    if bytes.len() < n.saturating_mul(dim).saturating_mul(4) {
        return Err(Error::Shape(format!("{}: truncated payload", path.display())));
    }
    Ok(())
}

/// Parses manifest JSON text without touching the file system.
pub fn parse_manifest_file(text: &str, origin: &str) -> Result<ManifestFile> {
    serde_json::from_str(text).map_err(|e| Error::json(origin, &e))
}

pub fn save_manifest_file(file: &ManifestFile, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(file).expect("manifest serialises");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<CohortManifest> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file = parse_manifest_file(&text, &path.display().to_string())?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    CohortManifest::from_file(file, path.to_path_buf(), base)
}
