use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Log-normalised expression of one case over the cohort's gene universe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpressionProfile {
    pub case_id: String,
    pub gene_names: Vec<String>,
    pub values: Vec<f64>,
}

impl ExpressionProfile {
    pub fn new(case_id: impl Into<String>, gene_names: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let p = Self {
            case_id: case_id.into(),
            gene_names,
            values,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.gene_names.len() != self.values.len() {
            return Err(Error::Shape(format!(
                "{} gene names for {} values",
                self.gene_names.len(),
                self.values.len()
            )));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "expression of {} at gene {}",
                self.case_id, self.gene_names[i]
            )));
        }
        let mut seen = HashSet::with_capacity(self.gene_names.len());
        for g in &self.gene_names {
            if !seen.insert(g.as_str()) {
                return Err(Error::invalid("gene_names", format!("duplicate gene {g}")));
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("profile serialises")
    }

    pub fn decode(bytes: &[u8], origin: &str) -> Result<Self> {
        let p: Self = serde_json::from_slice(bytes).map_err(|e| Error::json(origin, &e))?;
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, &path.display().to_string())
    }
}
