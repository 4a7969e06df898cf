//! Domain records and file formats: patch-feature bags, expression profiles,
//! pathway gene sets, labels and cohort manifests.

pub mod bag;
pub mod expression;
pub mod genesets;
pub mod manifest;

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

pub use bag::{decode_feature_header, decode_features, encode_features, load_patch_bag, FeatureFile, PatchBag};
pub use expression::ExpressionProfile;
pub use genesets::{load_gene_sets, GeneSet, GeneSetCatalog};
pub use manifest::{
    load_manifest, parse_manifest_file, save_manifest_file, CaseEntry, CohortManifest, LabelSpec,
    ManifestFile, SlideEntry, SlideRef, TaskSpec,
};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TaskKind {
    Classification { n_classes: usize },
    Survival,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TaskLabel {
    Classification { class_index: usize, n_classes: usize },
    /// `time` in months; `event` is false for right-censored cases.
    Survival { time: f64, event: bool },
}

impl TaskLabel {
    pub fn classification(class_index: usize, n_classes: usize) -> Result<Self> {
        if class_index >= n_classes {
            return Err(Error::invalid(
                "class_index",
                format!("{class_index} not below n_classes {n_classes}"),
            ));
        }
        Ok(Self::Classification {
            class_index,
            n_classes,
        })
    }

    pub fn survival(time: f64, event: bool) -> Result<Self> {
        if !(time.is_finite() && time > 0.0) {
            return Err(Error::invalid("time", format!("{time} is not a positive time")));
        }
        Ok(Self::Survival { time, event })
    }

    pub fn class_index(&self) -> Option<usize> {
        match self {
            Self::Classification { class_index, .. } => Some(*class_index),
            Self::Survival { .. } => None,
        }
    }
}

/// Where a row of [`CaseRecord::features`] came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchOrigin {
    pub slide_id: String,
    pub index: usize,
    pub coords: Option<[i64; 2]>,
}

/// One patient: all slide bags, their concatenated patch rows, optional
/// expression and the task label.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseRecord {
    pub case_id: String,
    pub bags: Vec<PatchBag>,
    pub expression: Option<ExpressionProfile>,
    pub label: TaskLabel,
    features: Array2<f64>,
}

impl CaseRecord {
    pub fn new(
        case_id: impl Into<String>,
        bags: Vec<PatchBag>,
        expression: Option<ExpressionProfile>,
        label: TaskLabel,
    ) -> Result<Self> {
        let case_id = case_id.into();
        let Some(first) = bags.first() else {
            return Err(Error::invalid("bags", format!("case {case_id} has no slides")));
        };
        let dim = first.dim();
        if bags.iter().any(|b| b.dim() != dim) {
            return Err(Error::Shape(format!("case {case_id}: slides differ in feature dim")));
        }
        let views: Vec<_> = bags.iter().map(|b| b.features.view()).collect();
        let features = concatenate(Axis(0), &views)
            .expect("dims checked")
            .mapv(f64::from);
        Ok(Self {
            case_id,
            bags,
            expression,
            label,
            features,
        })
    }

    /// Patient-level `N × d_v` patch matrix across every slide.
    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn n_patches(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn patch_origins(&self) -> Vec<PatchOrigin> {
        self.bags
            .iter()
            .flat_map(|b| {
                (0..b.n_patches()).map(move |i| PatchOrigin {
                    slide_id: b.slide_id.clone(),
                    index: i,
                    coords: b.coords.as_ref().map(|c| c[i]),
                })
            })
            .collect()
    }

    /// Copy without expression, as seen at inference time.
    pub fn without_expression(&self) -> Self {
        Self {
            expression: None,
            ..self.clone()
        }
    }
}

/// Gathers each pathway's subvector from `profile`; overlapping sets
/// duplicate the shared values.
pub fn partition_expression(
    profile: &ExpressionProfile,
    catalog: &GeneSetCatalog,
) -> Result<Vec<Vec<f64>>> {
    if profile.values.len() != catalog.universe_size {
        return Err(Error::Shape(format!(
            "profile has {} genes, catalog is bound to {}",
            profile.values.len(),
            catalog.universe_size
        )));
    }
    Ok(catalog
        .sets
        .iter()
        .map(|s| s.gene_indices.iter().map(|&i| profile.values[i]).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog(sets: &[&[usize]]) -> GeneSetCatalog {
        GeneSetCatalog {
            sets: sets
                .iter()
                .enumerate()
                .map(|(i, idx)| GeneSet {
                    name: format!("P{i}"),
                    description: String::new(),
                    gene_indices: idx.to_vec(),
                })
                .collect(),
            universe_size: 3,
            dropped_genes: 0,
        }
    }

    fn profile() -> ExpressionProfile {
        ExpressionProfile::new("c", vec!["a".into(), "b".into(), "c".into()], vec![1.0, 2.0, 3.0]).unwrap()
    }

    #[test]
    fn partition_gathers_by_index() {
        let parts = partition_expression(&profile(), &catalog(&[&[0, 2], &[1]])).unwrap();
        assert_eq!(parts, vec![vec![1.0, 3.0], vec![2.0]]);
    }

    #[test]
    fn overlapping_sets_duplicate_values() {
        let parts = partition_expression(&profile(), &catalog(&[&[0], &[0]])).unwrap();
        assert_eq!(parts, vec![vec![1.0], vec![1.0]]);
    }

    #[test]
    fn identity_set() {
        let parts = partition_expression(&profile(), &catalog(&[&[0, 1, 2]])).unwrap();
        assert_eq!(parts, vec![vec![1.0, 2.0, 3.0]]);
    }

    #[test]
    fn labels_validate() {
        assert!(TaskLabel::classification(2, 2).is_err());
        assert!(TaskLabel::survival(0.0, true).is_err());
        assert!(TaskLabel::survival(f64::NAN, true).is_err());
        assert!(TaskLabel::survival(3.5, false).is_ok());
    }

    #[test]
    fn multi_slide_cases_concatenate_rows() {
        let a = PatchBag::new("c", "s1", Array2::from_elem((2, 3), 1.0), None).unwrap();
        let b = PatchBag::new("c", "s2", Array2::from_elem((1, 3), 2.0), Some(vec![[5, 6]])).unwrap();
        let rec = CaseRecord::new("c", vec![a, b], None, TaskLabel::survival(1.0, true).unwrap()).unwrap();
        assert_eq!(rec.n_patches(), 3);
        assert_eq!(rec.features()[[2, 0]], 2.0);
        let origins = rec.patch_origins();
        assert_eq!(origins[2].slide_id, "s2");
        assert_eq!(origins[2].coords, Some([5, 6]));
    }
}
