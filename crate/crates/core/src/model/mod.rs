//! Networks: the dual-branch privileged/distilled model and the
//! gated-attention MIL baseline, plus predictions and checkpoint I/O.

pub mod abmil;
pub mod attention;
pub mod config;
pub mod lupi;
pub mod pathway;
pub mod reembed;

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use abmil::{AbmilNetwork, AbmilVars};
pub use attention::{CrossAttention, CrossAttentionOutput, GatedPool, PoolOutput};
pub use config::{Architecture, ModelConfig};
pub use lupi::{BranchVars, LupiNetwork};
pub use pathway::{PathwayEncoders, PseudoOutput, PseudoPathwayRegressor};
pub use reembed::{region_bounds, ReEmbed};

use crate::datamodel::TaskKind;
use crate::error::{Error, Result};
use crate::numerics::{softmax_rows, Context, Linear, ParameterStore, Tape, TensorFile, Var};

/// Values of every intermediate of one branch's forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// `P × d_v` (`Z` or `Ẑ`).
    pub pathway_embed: Array2<f64>,
    /// `P × N`.
    pub attention: Array2<f64>,
    /// `P × d_z`.
    pub fused: Array2<f64>,
    /// `d_z`.
    pub pooled: Vec<f64>,
    /// `P`.
    pub pool_weights: Vec<f64>,
    pub logits: Vec<f64>,
}

impl ForwardTrace {
    pub fn from_tape(tape: &Tape, vars: &BranchVars) -> Self {
        let row = |v: Var| tape.value(v).iter().copied().collect::<Vec<_>>();
        Self {
            pathway_embed: tape.value(vars.queries).clone(),
            attention: tape.value(vars.attention).clone(),
            fused: tape.value(vars.fused).clone(),
            pooled: row(vars.pooled),
            pool_weights: row(vars.pool_weights),
            logits: row(vars.logits),
        }
    }

    /// Largest deviation from one over attention rows and pooling weights.
    pub fn max_row_sum_error(&self) -> f64 {
        let rows = self
            .attention
            .rows()
            .into_iter()
            .map(|r| (r.sum() - 1.0).abs())
            .fold(0.0, f64::max);
        let pool = (self.pool_weights.iter().sum::<f64>() - 1.0).abs();
        rows.max(pool)
    }

    pub fn is_finite(&self) -> bool {
        self.pathway_embed.iter().all(|v| v.is_finite())
            && self.attention.iter().all(|v| v.is_finite())
            && self.fused.iter().all(|v| v.is_finite())
            && self.pooled.iter().all(|v| v.is_finite())
            && self.pool_weights.iter().all(|v| v.is_finite())
            && self.logits.iter().all(|v| v.is_finite())
    }
}

/// Model output turned into task-level quantities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Prediction {
    Classification { probs: Vec<f64> },
    /// `risk = Σ_k (1 − S_k)`: larger means earlier expected event.
    Survival { hazards: Vec<f64>, risk: f64 },
}

impl Prediction {
    pub fn from_logits(task: TaskKind, logits: &[f64]) -> Self {
        match task {
            TaskKind::Classification { .. } => {
                let m = Array2::from_shape_vec((1, logits.len()), logits.to_vec()).expect("row");
                Prediction::Classification {
                    probs: softmax_rows(&m).iter().copied().collect(),
                }
            }
            TaskKind::Survival => {
                let hazards: Vec<f64> = logits.iter().map(|&l| 1.0 / (1.0 + (-l).exp())).collect();
                Prediction::Survival {
                    risk: risk_from_hazards(&hazards),
                    hazards,
                }
            }
        }
    }

    /// Scalar ranking score: the positive-class probability for binary
    /// tasks, the top-class probability for multi-class, the risk for
    /// survival.
    pub fn score(&self) -> f64 {
        match self {
            Prediction::Classification { probs } if probs.len() == 2 => probs[1],
            Prediction::Classification { probs } => probs.iter().copied().fold(f64::MIN, f64::max),
            Prediction::Survival { risk, .. } => *risk,
        }
    }

    pub fn predicted_class(&self) -> Option<usize> {
        match self {
            Prediction::Classification { probs } => Some(argmax(probs)),
            Prediction::Survival { .. } => None,
        }
    }

    /// Element-wise mean of predictions of the same kind.
    pub fn mean(preds: &[Prediction]) -> Result<Prediction> {
        let Some(first) = preds.first() else {
            return Err(Error::invalid("predictions", "nothing to average"));
        };
        let n = preds.len() as f64;
        match first {
            Prediction::Classification { probs } => {
                let mut acc = vec![0.0; probs.len()];
                for p in preds {
                    let Prediction::Classification { probs } = p else {
                        return Err(Error::invalid("predictions", "mixed kinds"));
                    };
                    if probs.len() != acc.len() {
                        return Err(Error::Shape("class counts differ".into()));
                    }
                    acc.iter_mut().zip(probs).for_each(|(a, b)| *a += b);
                }
                Ok(Prediction::Classification {
                    probs: acc.into_iter().map(|v| v / n).collect(),
                })
            }
            Prediction::Survival { hazards, .. } => {
                let mut acc = vec![0.0; hazards.len()];
                let mut risk = 0.0;
                for p in preds {
                    let Prediction::Survival { hazards, risk: r } = p else {
                        return Err(Error::invalid("predictions", "mixed kinds"));
                    };
                    if hazards.len() != acc.len() {
                        return Err(Error::Shape("bin counts differ".into()));
                    }
                    acc.iter_mut().zip(hazards).for_each(|(a, b)| *a += b);
                    risk += r;
                }
                Ok(Prediction::Survival {
                    hazards: acc.into_iter().map(|v| v / n).collect(),
                    risk: risk / n,
                })
            }
        }
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn risk_from_hazards(hazards: &[f64]) -> f64 {
    let mut surv = 1.0;
    let mut risk = 0.0;
    for &h in hazards {
        surv *= 1.0 - h;
        risk += 1.0 - surv;
    }
    risk
}

/// Self-describing checkpoint metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Interior survival bin edges from the training fold (empty otherwise).
    #[serde(default)]
    pub bin_edges: Vec<f64>,
    #[serde(default)]
    pub fold: Option<usize>,
    #[serde(default)]
    pub epoch: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug)]
pub enum Network {
    Lupi(LupiNetwork),
    Abmil(AbmilNetwork),
}

impl Network {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Ok(match config.arch {
            Architecture::Lupi => Network::Lupi(LupiNetwork::new(config, seed)?),
            Architecture::Abmil => Network::Abmil(AbmilNetwork::new(config, seed)?),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Network::Lupi(n) => &n.config,
            Network::Abmil(n) => &n.config,
        }
    }

    pub fn store(&self) -> &ParameterStore {
        match self {
            Network::Lupi(n) => &n.store,
            Network::Abmil(n) => &n.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        match self {
            Network::Lupi(n) => &mut n.store,
            Network::Abmil(n) => &mut n.store,
        }
    }

    pub fn head(&self) -> Linear {
        match self {
            Network::Lupi(n) => n.head,
            Network::Abmil(n) => n.head,
        }
    }

    /// Logits of the inference path (the distilled branch for the dual
    /// network). Never reads expression.
    pub fn inference_logits(&self, tape: &mut Tape, features: &Array2<f64>, ctx: &mut Context) -> Result<Var> {
        if features.ncols() != self.config().d_v {
            return Err(Error::Shape(format!(
                "case has {}-dimensional features, model expects {}",
                features.ncols(),
                self.config().d_v
            )));
        }
        match self {
            Network::Lupi(n) => Ok(n.forward_distilled(tape, features, ctx)?.logits),
            Network::Abmil(n) => Ok(n.forward(tape, features, ctx)?.logits),
        }
    }

    pub fn predict(&self, features: &Array2<f64>) -> Result<Prediction> {
        let mut tape = Tape::new();
        let logits = self.inference_logits(&mut tape, features, &mut Context::eval())?;
        let values: Vec<f64> = tape.value(logits).iter().copied().collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prediction logits".into()));
        }
        Ok(Prediction::from_logits(self.config().task, &values))
    }

    pub fn to_checkpoint(&self, meta: &CheckpointMeta) -> TensorFile {
        let meta = serde_json::to_value(meta).expect("meta serialises");
        TensorFile::from_store(meta, self.store())
    }

    pub fn from_checkpoint(file: &TensorFile) -> Result<(Self, CheckpointMeta)> {
        let meta: CheckpointMeta = serde_json::from_value(file.meta.clone())
            .map_err(|e| Error::invalid("checkpoint meta", e.to_string()))?;
        let mut net = Network::new(meta.model.clone(), 0)?;
        file.restore_into(net.store_mut())?;
        Ok((net, meta))
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        Self::from_checkpoint(&TensorFile::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_v: 8,
            d_z: 4,
            d_k: 4,
            pathway_hidden: 5,
            pathway_sizes: vec![3, 2],
            regions: 2,
            ..ModelConfig::default()
        }
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    fn subvectors() -> Vec<Vec<f64>> {
        vec![vec![0.5, -0.2, 1.1], vec![0.3, 0.9]]
    }

    #[test]
    fn traces_satisfy_row_sum_invariants() {
        let net = LupiNetwork::new(tiny_config(), 1).unwrap();
        let x = random(3, 8, 2);
        let mut tape = Tape::new();
        let (p, d) = net.forward_both(&mut tape, &x, &subvectors(), &mut Context::eval()).unwrap();
        for vars in [p, d] {
            let trace = ForwardTrace::from_tape(&tape, &vars);
            assert!(trace.max_row_sum_error() < 1e-6);
            assert!(trace.is_finite());
            assert_eq!(trace.attention.dim(), (2, 3));
            assert_eq!(trace.pathway_embed.dim(), (2, 8));
            assert_eq!(trace.fused.dim(), (2, 4));
            assert!(trace.attention.iter().all(|&a| a >= 0.0));
        }
    }

    #[test]
    fn forced_equal_queries_give_equal_traces() {
        let net = LupiNetwork::new(tiny_config(), 3).unwrap();
        let x = random(5, 8, 4);
        let mut tape = Tape::new();
        let mut ctx = Context::eval();
        let privileged = net.forward_privileged(&mut tape, &x, &subvectors(), &mut ctx).unwrap();
        let z = tape.value(privileged.queries).clone();
        let mut tape2 = Tape::new();
        let patches = net.re_embed(&mut tape2, &x).unwrap();
        let forced = tape2.constant(z);
        let distilled = net.shared_branch(&mut tape2, patches, forced, None, &mut ctx).unwrap();
        let a = ForwardTrace::from_tape(&tape, &privileged);
        let b = ForwardTrace::from_tape(&tape2, &distilled);
        let close = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(u, v)| (u - v).abs() < 1e-6);
        assert!(close(a.attention.as_slice().unwrap(), b.attention.as_slice().unwrap()));
        assert!(close(a.fused.as_slice().unwrap(), b.fused.as_slice().unwrap()));
        assert!(close(&a.pooled, &b.pooled));
        assert!(close(&a.pool_weights, &b.pool_weights));
        assert!(close(&a.logits, &b.logits));
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let net = Network::new(tiny_config(), 5).unwrap();
        let x = random(6, 8, 6);
        assert_eq!(net.predict(&x).unwrap(), net.predict(&x).unwrap());
    }

    #[test]
    fn single_region_is_permutation_invariant() {
        let cfg = ModelConfig {
            regions: 1,
            ..tiny_config()
        };
        let net = Network::new(cfg, 7).unwrap();
        let x = random(6, 8, 8);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut xp = x.clone();
        for (i, &j) in perm.iter().enumerate() {
            xp.row_mut(i).assign(&x.row(j));
        }
        let a = net.predict(&x).unwrap().score();
        let b = net.predict(&xp).unwrap().score();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn within_region_permutation_invariant() {
        let net = Network::new(tiny_config(), 9).unwrap();
        let x = random(6, 8, 10);
        // regions: rows 0..3 and 3..6
        let perm = [2usize, 0, 1, 5, 3, 4];
        let mut xp = x.clone();
        for (i, &j) in perm.iter().enumerate() {
            xp.row_mut(i).assign(&x.row(j));
        }
        let a = net.predict(&x).unwrap().score();
        let b = net.predict(&xp).unwrap().score();
        assert!((a - b).abs() < 1e-12);
    }

    fn abmil_config() -> ModelConfig {
        ModelConfig {
            arch: Architecture::Abmil,
            d_v: 8,
            abmil_hidden: 6,
            abmil_attn: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn abmil_single_patch_has_unit_weight() {
        let net = AbmilNetwork::new(abmil_config(), 1).unwrap();
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, &random(1, 8, 1), &mut Context::eval()).unwrap();
        assert_eq!(tape.value(out.weights)[[0, 0]], 1.0);
    }

    #[test]
    fn abmil_identical_patches_ignore_attention_params() {
        let mut net = AbmilNetwork::new(abmil_config(), 1).unwrap();
        let row = random(1, 8, 3);
        let x = Array2::from_shape_fn((5, 8), |(_, j)| row[[0, j]]);
        let run = |net: &AbmilNetwork| {
            let mut tape = Tape::new();
            let out = net.forward(&mut tape, &x, &mut Context::eval()).unwrap();
            tape.value(out.logits).clone()
        };
        let before = run(&net);
        let w = net.pool.score.weight;
        net.store.value_mut(w).mapv_inplace(|v| v * -3.0 + 0.5);
        let after = run(&net);
        for (a, b) in before.iter().zip(after.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn abmil_is_permutation_invariant() {
        let net = Network::new(abmil_config(), 2).unwrap();
        let x = random(7, 8, 4);
        let mut xp = x.clone();
        for i in 0..7 {
            xp.row_mut(i).assign(&x.row((i + 3) % 7));
        }
        let a = net.predict(&x).unwrap();
        let b = net.predict(&xp).unwrap();
        assert!((a.score() - b.score()).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions_up_to_f32() {
        let mut net = Network::new(tiny_config(), 11).unwrap();
        net.store_mut().round_to_f32();
        let meta = CheckpointMeta {
            model: net.config().clone(),
            bin_edges: vec![],
            fold: Some(0),
            epoch: Some(3),
            seed: Some(11),
        };
        let file = net.to_checkpoint(&meta);
        let (back, meta2) = Network::from_checkpoint(&TensorFile::decode(&file.encode()).unwrap()).unwrap();
        assert_eq!(meta2, meta);
        let x = random(4, 8, 12);
        assert_eq!(net.predict(&x).unwrap(), back.predict(&x).unwrap());
    }

    #[test]
    fn feature_dim_mismatch_is_rejected() {
        let net = Network::new(tiny_config(), 1).unwrap();
        assert!(matches!(net.predict(&random(3, 5, 1)), Err(Error::Shape(_))));
    }

    #[test]
    fn risk_increases_with_hazard() {
        assert!(risk_from_hazards(&[0.9, 0.9]) > risk_from_hazards(&[0.1, 0.1]));
        let mean = Prediction::mean(&[
            Prediction::Classification { probs: vec![0.8, 0.2] },
            Prediction::Classification { probs: vec![0.4, 0.6] },
        ])
        .unwrap();
        assert_eq!(mean, Prediction::Classification { probs: vec![0.6000000000000001, 0.4] });
    }
}
