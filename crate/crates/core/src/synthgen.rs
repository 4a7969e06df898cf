//! Seeded synthetic cohorts in which latent pathway activity drives patch
//! features, expression and labels.
//!
//! Per case, `a ~ N(0, I_P)`. Pathway `p`'s expression subvector is
//! `a_p · dir_p + noise_expr · ε`. Each patch draws a pathway `p` uniformly
//! and equals `proto_p + signal · a_p · shift_p + noise_patch · ε`. The class
//! label is `1(Σ_{p∈informative} a_p > 0)`; survival time is
//! `time_scale · exp(−β Σ_{p∈informative} a_p + time_noise · ε)`, censored
//! independently with probability `censor_rate` at a uniform fraction of the
//! event time.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    save_manifest_file, CaseRecord, CohortManifest, ExpressionProfile, GeneSet, GeneSetCatalog, LabelSpec,
    ManifestFile, PatchBag, SlideEntry, TaskKind, TaskLabel, TaskSpec,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    #[default]
    Classification,
    Survival,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_cases: usize,
    pub patches_min: usize,
    pub patches_max: usize,
    pub feature_dim: usize,
    pub n_pathways: usize,
    pub genes_per_pathway: usize,
    pub label_kind: LabelKind,
    pub noise_patch: f64,
    pub noise_expr: f64,
    pub informative_pathways: Vec<usize>,
    /// Standard deviation of the prototype entries.
    pub prototype_scale: f64,
    /// Scale of the activity-dependent shift in patch features.
    pub signal: f64,
    pub beta: f64,
    pub time_scale: f64,
    pub time_noise: f64,
    pub censor_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_cases: 200,
            patches_min: 16,
            patches_max: 32,
            feature_dim: 32,
            n_pathways: 10,
            genes_per_pathway: 8,
            label_kind: LabelKind::Classification,
            noise_patch: 1.0,
            noise_expr: 0.5,
            informative_pathways: vec![0],
            prototype_scale: 1.0,
            signal: 1.0,
            beta: 1.0,
            time_scale: 24.0,
            time_noise: 1.0,
            censor_rate: 0.3,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::invalid(format!("synth.{field}"), msg));
        if self.n_cases == 0 {
            return bad("n_cases", "must be at least 1");
        }
        if self.patches_min == 0 || self.patches_min > self.patches_max {
            return bad("patches_min", "need 1 ≤ patches_min ≤ patches_max");
        }
        if self.feature_dim == 0 || self.n_pathways == 0 || self.genes_per_pathway == 0 {
            return bad("feature_dim", "dimensions must be positive");
        }
        if self.informative_pathways.is_empty() {
            return bad("informative_pathways", "must be nonempty");
        }
        if self.informative_pathways.iter().any(|&p| p >= self.n_pathways) {
            return bad("informative_pathways", "index out of range");
        }
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.noise_patch) || !finite_nonneg(self.noise_expr) {
            return bad("noise_patch", "noise levels must be non-negative");
        }
        if !finite_nonneg(self.prototype_scale) {
            return bad("prototype_scale", "must be finite and non-negative");
        }
        if !finite_nonneg(self.signal) || !finite_nonneg(self.time_noise) || !self.beta.is_finite() {
            return bad("signal", "must be finite and non-negative");
        }
        if !(self.time_scale.is_finite() && self.time_scale > 0.0) {
            return bad("time_scale", "must be positive");
        }
        if !(0.0..1.0).contains(&self.censor_rate) {
            return bad("censor_rate", "must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn task(&self) -> TaskKind {
        match self.label_kind {
            LabelKind::Classification => TaskKind::Classification { n_classes: 2 },
            LabelKind::Survival => TaskKind::Survival,
        }
    }
}

/// One generated case with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCase {
    pub case_id: String,
    pub slide_id: String,
    pub features: Array2<f32>,
    pub coords: Vec<[i64; 2]>,
    /// Pathway whose prototype generated each patch.
    pub patch_pathways: Vec<usize>,
    pub latent: Vec<f64>,
    pub expression: Vec<f64>,
    pub label: TaskLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCohort {
    pub config: SynthConfig,
    pub gene_names: Vec<String>,
    pub catalog: GeneSetCatalog,
    pub prototypes: Array2<f64>,
    pub shifts: Array2<f64>,
    pub directions: Array2<f64>,
    pub cases: Vec<SynthCase>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn unit_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut m = Array2::from_shape_fn((rows, cols), |_| normal(rng));
    for mut r in m.rows_mut() {
        let norm = r.dot(&r).sqrt().max(1e-12);
        r.mapv_inplace(|v| v / norm);
    }
    m
}

pub fn case_id(i: usize) -> String {
    format!("case_{i:04}")
}

/// Generates a cohort in memory. Stream 0 of the seeded generator holds the
/// cohort-level parameters; stream `i + 1` holds case `i`.
pub fn generate(cfg: &SynthConfig) -> Result<SynthCohort> {
    cfg.validate()?;
    let (p_count, g, d) = (cfg.n_pathways, cfg.genes_per_pathway, cfg.feature_dim);
    let mut global = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prototypes = Array2::from_shape_fn((p_count, d), |_| cfg.prototype_scale * normal(&mut global));
    let shifts = unit_rows(p_count, d, &mut global);
    let directions = Array2::from_shape_fn((p_count, g), |_| normal(&mut global));

    let gene_names: Vec<String> = (0..p_count)
        .flat_map(|p| (0..g).map(move |k| format!("G{p:02}_{k:02}")))
        .collect();
    let catalog = GeneSetCatalog {
        sets: (0..p_count)
            .map(|p| GeneSet {
                name: format!("PATHWAY_{p:02}"),
                description: if cfg.informative_pathways.contains(&p) {
                    "informative".into()
                } else {
                    "background".into()
                },
                gene_indices: (p * g..(p + 1) * g).collect(),
            })
            .collect(),
        universe_size: p_count * g,
        dropped_genes: 0,
    };

    let mut cases = Vec::with_capacity(cfg.n_cases);
    for i in 0..cfg.n_cases {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64 + 1);
        let latent: Vec<f64> = (0..p_count).map(|_| normal(&mut rng)).collect();
        let expression: Vec<f64> = (0..p_count)
            .flat_map(|p| (0..g).map(move |k| (p, k)))
            .map(|(p, k)| latent[p] * directions[[p, k]] + cfg.noise_expr * normal(&mut rng))
            .collect();
        let n = rng.random_range(cfg.patches_min..=cfg.patches_max);
        let mut patch_pathways = Vec::with_capacity(n);
        let mut features = Array2::<f32>::zeros((n, d));
        for j in 0..n {
            let p = rng.random_range(0..p_count);
            patch_pathways.push(p);
            for k in 0..d {
                let v = prototypes[[p, k]] + cfg.signal * latent[p] * shifts[[p, k]] + cfg.noise_patch * normal(&mut rng);
                features[[j, k]] = v as f32;
            }
        }
        let drive: f64 = cfg.informative_pathways.iter().map(|&p| latent[p]).sum();
        let label = match cfg.label_kind {
            LabelKind::Classification => TaskLabel::classification(usize::from(drive > 0.0), 2)?,
            LabelKind::Survival => {
                let t = cfg.time_scale * (-cfg.beta * drive + cfg.time_noise * normal(&mut rng)).exp();
                let censored = rng.random_bool(cfg.censor_rate);
                let frac: f64 = 1.0 - rng.random::<f64>();
                let (time, event) = if censored { (t * frac, false) } else { (t, true) };
                TaskLabel::survival(time.max(f64::MIN_POSITIVE), event)?
            }
        };
        let coords = (0..n as i64).map(|j| [(j % 32) * 256, (j / 32) * 256]).collect();
        cases.push(SynthCase {
            case_id: case_id(i),
            slide_id: format!("{}_s0", case_id(i)),
            features,
            coords,
            patch_pathways,
            latent,
            expression,
            label,
        });
    }
    Ok(SynthCohort {
        config: cfg.clone(),
        gene_names,
        catalog,
        prototypes,
        shifts,
        directions,
        cases,
    })
}

impl SynthCohort {
    pub fn case_records(&self) -> Result<Vec<CaseRecord>> {
        self.cases.iter().map(|c| self.case_record(c)).collect()
    }

    pub fn case_record(&self, c: &SynthCase) -> Result<CaseRecord> {
        let bag = PatchBag::new(c.case_id.clone(), c.slide_id.clone(), c.features.clone(), Some(c.coords.clone()))?;
        let expr = ExpressionProfile::new(c.case_id.clone(), self.gene_names.clone(), c.expression.clone())?;
        CaseRecord::new(c.case_id.clone(), vec![bag], Some(expr), c.label)
    }

    /// Writes the cohort files under `out` and returns the loaded manifest.
    pub fn write(&self, out: &Path) -> Result<CohortManifest> {
        let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(p, e));
        mkdir(&out.join("features"))?;
        mkdir(&out.join("expression"))?;
        let gmt_path = out.join("genesets.gmt");
        std::fs::write(&gmt_path, self.catalog.to_gmt(&self.gene_names)).map_err(|e| Error::io(&gmt_path, e))?;

        let mut entries = Vec::with_capacity(self.cases.len());
        for c in &self.cases {
            let features = format!("features/{}.f32", c.slide_id);
            let expression = format!("expression/{}.json", c.case_id);
            let bag = PatchBag::new(c.case_id.clone(), c.slide_id.clone(), c.features.clone(), Some(c.coords.clone()))?;
            bag.save(&out.join(&features))?;
            ExpressionProfile::new(c.case_id.clone(), self.gene_names.clone(), c.expression.clone())?
                .save(&out.join(&expression))?;
            let label = match c.label {
                TaskLabel::Classification { class_index, .. } => LabelSpec::Class { class: class_index },
                TaskLabel::Survival { time, event } => LabelSpec::Survival { time, event },
            };
            entries.push(SlideEntry {
                case_id: c.case_id.clone(),
                slide_id: c.slide_id.clone(),
                features,
                expression: Some(expression),
                label,
            });
        }
        let task = match self.config.label_kind {
            LabelKind::Classification => TaskSpec::Classification { n_classes: 2 },
            LabelKind::Survival => TaskSpec::Survival,
        };
        let file = ManifestFile {
            feature_dim: self.config.feature_dim,
            gene_universe: self.gene_names.clone(),
            gene_sets: Some("genesets.gmt".into()),
            task,
            cases: entries,
        };
        let manifest_path = out.join("manifest.json");
        save_manifest_file(&file, &manifest_path)?;

        let provenance = serde_json::json!({
            "generator": "lupi synthgen",
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.config.seed,
            "config": self.config,
        });
        let prov_path = out.join("provenance.json");
        let mut text = serde_json::to_string_pretty(&provenance).expect("provenance serialises");
        text.push('\n');
        std::fs::write(&prov_path, text).map_err(|e| Error::io(&prov_path, e))?;
        crate::datamodel::load_manifest(&manifest_path)
    }
}

/// Generates a cohort and writes it under `out`.
pub fn generate_cohort(cfg: &SynthConfig, out: &Path) -> Result<CohortManifest> {
    generate(cfg)?.write(out)
}
