use serde::{Deserialize, Serialize};

use crate::datamodel::TaskKind;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Dual-branch privileged/distilled network.
    #[default]
    Lupi,
    /// Gated-attention MIL baseline over patches.
    Abmil,
}

/// Network hyperparameters. `d_v`, `pathway_sizes` and `task` are filled
/// from the cohort when training starts; the rest are user settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub d_v: usize,
    /// Hidden / attended width.
    pub d_z: usize,
    pub d_k: usize,
    /// Width of the hidden layer of each pathway encoder.
    pub pathway_hidden: usize,
    /// Standardize each pathway embedding row, pinning the scale of `Z`.
    pub pathway_norm: bool,
    /// Gene count of each pathway; its length is the pathway count P.
    pub pathway_sizes: Vec<usize>,
    /// Number of contiguous re-embedding regions.
    pub regions: usize,
    pub dropout: f64,
    pub n_heads: usize,
    /// Weight of the alignment terms in the total loss.
    pub lambda: f64,
    /// ℓ1 coefficient on the survival head weights.
    pub l1: f64,
    /// Discrete-time hazard bins for survival tasks.
    pub n_bins: usize,
    pub abmil_hidden: usize,
    pub abmil_attn: usize,
    pub task: TaskKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::Lupi,
            d_v: 512,
            d_z: 256,
            d_k: 256,
            pathway_hidden: 256,
            pathway_norm: false,
            pathway_sizes: Vec::new(),
            regions: 50,
            dropout: 0.25,
            n_heads: 1,
            lambda: 1.0,
            l1: 1e-5,
            n_bins: 4,
            abmil_hidden: 512,
            abmil_attn: 256,
            task: TaskKind::Classification { n_classes: 2 },
        }
    }
}

impl ModelConfig {
    pub fn n_pathways(&self) -> usize {
        self.pathway_sizes.len()
    }

    /// Width of the prediction head output.
    pub fn n_outputs(&self) -> usize {
        match self.task {
            TaskKind::Classification { n_classes } => n_classes,
            TaskKind::Survival => self.n_bins,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::invalid(format!("model.{field}"), msg));
        if self.d_v == 0 || self.d_z == 0 || self.d_k == 0 {
            return bad("d_z", "dimensions must be positive");
        }
        if self.d_k > self.d_z {
            return bad("d_k", "must not exceed d_z");
        }
        if self.regions == 0 {
            return bad("regions", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must lie in [0, 1)");
        }
        if self.n_heads == 0 || self.d_k % self.n_heads != 0 || self.d_z % self.n_heads != 0 {
            return bad("n_heads", "must divide both d_k and d_z");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", "must be a non-negative number");
        }
        if !(self.l1 >= 0.0 && self.l1.is_finite()) {
            return bad("l1", "must be a non-negative number");
        }
        if self.n_bins == 0 {
            return bad("n_bins", "must be at least 1");
        }
        if let TaskKind::Classification { n_classes } = self.task {
            if n_classes < 2 {
                return bad("task", "classification needs at least two classes");
            }
        }
        match self.arch {
            Architecture::Lupi => {
                if self.pathway_sizes.is_empty() {
                    return bad("pathway_sizes", "need at least one pathway");
                }
                if self.pathway_sizes.contains(&0) {
                    return bad("pathway_sizes", "empty pathway");
                }
                if self.pathway_hidden == 0 {
                    return bad("pathway_hidden", "must be positive");
                }
            }
            Architecture::Abmil => {
                if self.abmil_hidden == 0 || self.abmil_attn == 0 {
                    return bad("abmil_hidden", "must be positive");
                }
            }
        }
        Ok(())
    }
}
