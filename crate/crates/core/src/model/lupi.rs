//! The dual-branch network. Both branches share re-embedding, cross-attention,
//! fusion, pooling and the prediction head; they differ only in where the
//! pathway queries come from.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::attention::{CrossAttention, GatedPool};
use super::config::ModelConfig;
use super::pathway::{PathwayEncoders, PseudoPathwayRegressor};
use super::reembed::ReEmbed;
use crate::error::Result;
use crate::numerics::{dropout, Context, Linear, ParamId, ParameterStore, Tape, Var};

/// Tape handles of one branch's forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BranchVars {
    /// `N × d_v` re-embedded patches.
    pub patches: Var,
    /// `P × d_v` queries (`Z` or `Ẑ`).
    pub queries: Var,
    pub attention: Var,
    pub log_attention: Var,
    pub fused: Var,
    pub pooled: Var,
    pub pool_weights: Var,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct LupiNetwork {
    pub config: ModelConfig,
    pub store: ParameterStore,
    pub reembed: ReEmbed,
    pub encoders: PathwayEncoders,
    pub pseudo: PseudoPathwayRegressor,
    pub cross: CrossAttention,
    pub pool: GatedPool,
    pub head: Linear,
}

impl LupiNetwork {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let c = &config;
        let reembed = ReEmbed::init(&mut store, c.d_v, c.d_z, c.regions, &mut rng)?;
        let encoders = PathwayEncoders::init(
            &mut store,
            &c.pathway_sizes,
            c.pathway_hidden,
            c.d_v,
            c.dropout,
            &mut rng,
        )?;
        let pseudo = PseudoPathwayRegressor::init(&mut store, c.n_pathways(), c.d_v, c.d_z, &mut rng)?;
        let cross = CrossAttention::init(&mut store, "cross", c.d_v, c.d_z, c.d_k, c.n_heads, &mut rng)?;
        let pool = GatedPool::init(&mut store, "pool", c.d_z, c.d_z, &mut rng)?;
        let head = Linear::init(&mut store, "head", c.d_z, c.n_outputs(), true, &mut rng)?;
        Ok(Self {
            config,
            store,
            reembed,
            encoders,
            pseudo,
            cross,
            pool,
            head,
        })
    }

    /// Parameters used only by the privileged branch.
    pub fn privileged_only_params(&self) -> Vec<ParamId> {
        self.encoders.param_ids()
    }

    /// Parameters used only by the distilled branch.
    pub fn distilled_only_params(&self) -> Vec<ParamId> {
        self.pseudo.param_ids()
    }

    /// Parameters used by both branches.
    pub fn shared_params(&self) -> Vec<ParamId> {
        let own: std::collections::HashSet<ParamId> = self
            .privileged_only_params()
            .into_iter()
            .chain(self.distilled_only_params())
            .collect();
        self.store.ids().filter(|id| !own.contains(id)).collect()
    }

    pub fn re_embed(&self, tape: &mut Tape, features: &Array2<f64>) -> Result<Var> {
        let x = tape.constant(features.clone());
        self.reembed.apply(tape, &self.store, x)
    }

    /// Cross-attention → fusion → gated pooling → head for given queries.
    pub fn shared_branch(
        &self,
        tape: &mut Tape,
        patches: Var,
        queries: Var,
        gate: Option<Var>,
        ctx: &mut Context,
    ) -> Result<BranchVars> {
        let out = self.cross.apply(tape, &self.store, queries, patches, gate)?;
        let fused = dropout(tape, out.fused, self.config.dropout, ctx)?;
        let pooled = self.pool.apply(tape, &self.store, fused)?;
        let logits = self.head.apply(tape, &self.store, pooled.pooled)?;
        Ok(BranchVars {
            patches,
            queries,
            attention: out.attention,
            log_attention: out.log_attention,
            fused,
            pooled: pooled.pooled,
            pool_weights: pooled.weights,
            logits,
        })
    }

    pub fn pathway_embeddings(
        &self,
        tape: &mut Tape,
        subvectors: &[Vec<f64>],
        ctx: &mut Context,
    ) -> Result<Var> {
        let z = self.encoders.apply(tape, &self.store, subvectors, ctx)?;
        if self.config.pathway_norm {
            tape.norm_rows(z)
        } else {
            Ok(z)
        }
    }

    pub fn pseudo_embeddings(&self, tape: &mut Tape, patches: Var) -> Result<Var> {
        Ok(self.pseudo.apply(tape, &self.store, patches)?.embeddings)
    }

    pub fn forward_privileged(
        &self,
        tape: &mut Tape,
        features: &Array2<f64>,
        subvectors: &[Vec<f64>],
        ctx: &mut Context,
    ) -> Result<BranchVars> {
        let patches = self.re_embed(tape, features)?;
        let z = self.pathway_embeddings(tape, subvectors, ctx)?;
        self.shared_branch(tape, patches, z, None, ctx)
    }

    pub fn forward_distilled(
        &self,
        tape: &mut Tape,
        features: &Array2<f64>,
        ctx: &mut Context,
    ) -> Result<BranchVars> {
        self.forward_distilled_gated(tape, features, None, ctx)
    }

    pub fn forward_distilled_gated(
        &self,
        tape: &mut Tape,
        features: &Array2<f64>,
        gate: Option<Var>,
        ctx: &mut Context,
    ) -> Result<BranchVars> {
        let patches = self.re_embed(tape, features)?;
        self.distilled_from(tape, patches, gate, ctx)
    }

    /// Distilled branch over already re-embedded patches.
    pub fn distilled_from(&self, tape: &mut Tape, patches: Var, gate: Option<Var>, ctx: &mut Context) -> Result<BranchVars> {
        let zhat = self.pseudo_embeddings(tape, patches)?;
        self.shared_branch(tape, patches, zhat, gate, ctx)
    }

    /// Both branches over one shared re-embedding, as used in training.
    pub fn forward_both(
        &self,
        tape: &mut Tape,
        features: &Array2<f64>,
        subvectors: &[Vec<f64>],
        ctx: &mut Context,
    ) -> Result<(BranchVars, BranchVars)> {
        let patches = self.re_embed(tape, features)?;
        let z = self.pathway_embeddings(tape, subvectors, ctx)?;
        let privileged = self.shared_branch(tape, patches, z, None, ctx)?;
        let zhat = self.pseudo_embeddings(tape, patches)?;
        let distilled = self.shared_branch(tape, patches, zhat, None, ctx)?;
        Ok((privileged, distilled))
    }
}
