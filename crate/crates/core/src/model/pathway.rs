//! Pathway embeddings: per-pathway expression encoders (privileged) and the
//! image-only pseudo-pathway regressor (distilled).

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{mlp_apply, Activation, Context, Linear, ParamId, ParameterStore, Tape, Var};

/// One independently parameterised MLP `G_p → hidden → d_v` per pathway.
#[derive(Clone, Debug)]
pub struct PathwayEncoders {
    pub encoders: Vec<[Linear; 2]>,
    pub dropout: f64,
}

impl PathwayEncoders {
    pub fn init(
        store: &mut ParameterStore,
        sizes: &[usize],
        hidden: usize,
        d_v: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let encoders = sizes
            .iter()
            .enumerate()
            .map(|(p, &g)| {
                Ok([
                    Linear::init(store, &format!("encoder.{p}.0"), g, hidden, true, rng)?,
                    Linear::init(store, &format!("encoder.{p}.1"), hidden, d_v, true, rng)?,
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { encoders, dropout })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.encoders
            .iter()
            .flat_map(|ls| ls.iter().flat_map(|l| std::iter::once(l.weight).chain(l.bias)))
            .collect()
    }

    /// Stacks `f_p(subvector_p)` into a `P × d_v` matrix.
    pub fn apply(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        subvectors: &[Vec<f64>],
        ctx: &mut Context,
    ) -> Result<Var> {
        if subvectors.len() != self.encoders.len() {
            return Err(Error::Shape(format!(
                "{} pathway subvectors for {} encoders",
                subvectors.len(),
                self.encoders.len()
            )));
        }
        let mut rows = Vec::with_capacity(subvectors.len());
        for (p, (sub, layers)) in subvectors.iter().zip(&self.encoders).enumerate() {
            let g = layers[0].input_dim(store);
            if sub.len() != g {
                return Err(Error::Shape(format!(
                    "pathway {p} subvector has {} genes, encoder expects {g}",
                    sub.len()
                )));
            }
            let x = tape.constant(Array2::from_shape_vec((1, g), sub.clone()).expect("len"));
            rows.push(mlp_apply(tape, store, x, layers, Activation::Relu, self.dropout, ctx)?);
        }
        tape.concat_rows(&rows)
    }
}

/// `P` learned query vectors attend over the patches through their own
/// (unshared) attention; a per-pathway linear map lifts each attended row
/// from `d_z` to `d_v`.
#[derive(Clone, Debug)]
pub struct PseudoPathwayRegressor {
    pub queries: ParamId,
    pub key: Linear,
    pub value: Linear,
    /// `(P·d_z) × d_v`, block `p` is pathway `p`'s map.
    pub out_weight: ParamId,
    /// `P × d_v`.
    pub out_bias: ParamId,
    scale: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct PseudoOutput {
    /// `P × d_v` pseudo-pathway embeddings.
    pub embeddings: Var,
    /// `P × N` internal attention.
    pub attention: Var,
}

impl PseudoPathwayRegressor {
    pub fn init(
        store: &mut ParameterStore,
        n_pathways: usize,
        d_v: usize,
        d_z: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let qb = 1.0 / (d_z as f64).sqrt();
        let queries = store.add(
            "pseudo.queries",
            Array2::from_shape_fn((n_pathways, d_z), |_| rng.random_range(-qb..qb)),
        )?;
        let key = Linear::init(store, "pseudo.key", d_v, d_z, false, rng)?;
        let value = Linear::init(store, "pseudo.value", d_v, d_z, false, rng)?;
        let out_weight = store.add(
            "pseudo.out.weight",
            Array2::from_shape_fn((n_pathways * d_z, d_v), |_| rng.random_range(-qb..qb)),
        )?;
        let out_bias = store.add(
            "pseudo.out.bias",
            Array2::from_shape_fn((n_pathways, d_v), |_| rng.random_range(-qb..qb)),
        )?;
        Ok(Self {
            queries,
            key,
            value,
            out_weight,
            out_bias,
            scale: qb,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.queries, self.key.weight, self.value.weight, self.out_weight, self.out_bias]
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParameterStore, patches: Var) -> Result<PseudoOutput> {
        let q = tape.param(store, self.queries);
        let k = self.key.apply(tape, store, patches)?;
        let v = self.value.apply(tape, store, patches)?;
        let kt = tape.transpose(k);
        let logits = tape.matmul(q, kt)?;
        let logits = tape.scale(logits, self.scale);
        let attention = tape.softmax_rows(logits)?;
        let attended = tape.matmul(attention, v)?;
        let w = tape.param(store, self.out_weight);
        let b = tape.param(store, self.out_bias);
        let lifted = tape.row_linear(attended, w)?;
        let embeddings = tape.add(lifted, b)?;
        Ok(PseudoOutput {
            embeddings,
            attention,
        })
    }
}
