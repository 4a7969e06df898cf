//! Pathway gene sets in GMT form: `name<TAB>description<TAB>gene<TAB>gene...`.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneSet {
    pub name: String,
    pub description: String,
    /// Indices into the bound gene universe, in file order.
    pub gene_indices: Vec<usize>,
}

/// Ordered pathway gene sets bound to a gene universe. Sets may overlap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneSetCatalog {
    pub sets: Vec<GeneSet>,
    pub universe_size: usize,
    /// Gene symbols dropped because they were absent from the universe.
    pub dropped_genes: usize,
}

impl GeneSetCatalog {
    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.sets.iter().map(|s| s.gene_indices.len()).collect()
    }

    pub fn names(&self) -> Vec<&str> {
        self.sets.iter().map(|s| s.name.as_str()).collect()
    }

    /// Parses GMT text against `universe`.
    pub fn parse(text: &str, universe: &[String]) -> Result<Self> {
        let lookup: HashMap<&str, usize> = universe
            .iter()
            .enumerate()
            .map(|(i, g)| (g.as_str(), i))
            .collect();
        let mut sets: Vec<GeneSet> = Vec::new();
        let mut dropped = 0;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |message: &str| Error::Parse {
                path: "gene sets".into(),
                line: lineno + 1,
                column: 1,
                message: message.into(),
            };
            let mut fields = line.split('\t');
            let name = fields.next().unwrap_or("").trim();
            let Some(description) = fields.next() else {
                return Err(malformed("expected name, description and genes separated by tabs"));
            };
            if name.is_empty() {
                return Err(malformed("empty pathway name"));
            }
            if sets.iter().any(|s| s.name == name) {
                return Err(malformed(&format!("duplicate pathway {name}")));
            }
            let genes: Vec<&str> = fields.map(str::trim).filter(|g| !g.is_empty()).collect();
            if genes.is_empty() {
                return Err(malformed("pathway lists no genes"));
            }
            let mut indices = Vec::with_capacity(genes.len());
            for g in genes {
                match lookup.get(g) {
                    Some(&i) if !indices.contains(&i) => indices.push(i),
                    Some(_) => {}
                    None => dropped += 1,
                }
            }
            if indices.is_empty() {
                return Err(Error::EmptyPathway(name.to_string()));
            }
            sets.push(GeneSet {
                name: name.to_string(),
                description: description.to_string(),
                gene_indices: indices,
            });
        }
        if sets.is_empty() {
            return Err(Error::invalid("gene sets", "no pathways"));
        }
        Ok(Self {
            sets,
            universe_size: universe.len(),
            dropped_genes: dropped,
        })
    }

    pub fn to_gmt(&self, universe: &[String]) -> String {
        let mut out = String::new();
        for s in &self.sets {
            out.push_str(&s.name);
            out.push('\t');
            out.push_str(&s.description);
            for &i in &s.gene_indices {
                out.push('\t');
                out.push_str(&universe[i]);
            }
            out.push('\n');
        }
        out
    }
}

pub fn load_gene_sets(path: &Path, universe: &[String]) -> Result<GeneSetCatalog> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    GeneSetCatalog::parse(&text, universe).map_err(|e| match e {
        Error::Parse {
            line,
            column,
            message,
            ..
        } => Error::Parse {
            path: path.display().to_string(),
            line,
            column,
            message,
        },
        other => other,
    })
}
