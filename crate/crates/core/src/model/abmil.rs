//! Gated-attention MIL baseline: a per-patch fully connected layer, gated
//! attention pooling over patches and a linear head.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::attention::GatedPool;
use super::config::ModelConfig;
use crate::error::Result;
use crate::numerics::{dropout, Context, Linear, ParameterStore, Tape, Var};

#[derive(Clone, Debug)]
pub struct AbmilNetwork {
    pub config: ModelConfig,
    pub store: ParameterStore,
    pub fc: Linear,
    pub pool: GatedPool,
    pub head: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct AbmilVars {
    /// `1 × N` patch weights.
    pub weights: Var,
    pub pooled: Var,
    pub logits: Var,
}

impl AbmilNetwork {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let fc = Linear::init(&mut store, "abmil.fc", config.d_v, config.abmil_hidden, true, &mut rng)?;
        let pool = GatedPool::init(&mut store, "abmil.pool", config.abmil_hidden, config.abmil_attn, &mut rng)?;
        let head = Linear::init(&mut store, "head", config.abmil_hidden, config.n_outputs(), true, &mut rng)?;
        Ok(Self {
            config,
            store,
            fc,
            pool,
            head,
        })
    }

    pub fn forward(&self, tape: &mut Tape, features: &Array2<f64>, ctx: &mut Context) -> Result<AbmilVars> {
        let x = tape.constant(features.clone());
        let h = self.fc.apply(tape, &self.store, x)?;
        let h = tape.relu(h);
        let h = dropout(tape, h, self.config.dropout, ctx)?;
        let pooled = self.pool.apply(tape, &self.store, h)?;
        let logits = self.head.apply(tape, &self.store, pooled.pooled)?;
        Ok(AbmilVars {
            weights: pooled.weights,
            pooled: pooled.pooled,
            logits,
        })
    }
}
