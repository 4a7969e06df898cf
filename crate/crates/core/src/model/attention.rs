//! Pathway-query cross-attention with fusion, and gated attention pooling.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Linear, ParameterStore, Tape, Var};

#[derive(Clone, Debug)]
struct Head {
    query: Linear,
    key: Linear,
    value: Linear,
    scale: f64,
}

/// Shared cross-attention: `P` queries of width `d_v` attend over `N`
/// re-embedded patches; attended features are fused with a projection of
/// the query through one `2·d_z → d_z` linear layer.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    heads: Vec<Head>,
    pub query_proj: Linear,
    pub fuse: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct CrossAttentionOutput {
    /// `P × N`, averaged over heads; every row is a probability vector.
    pub attention: Var,
    /// Elementwise log of `attention`, computed without underflow.
    pub log_attention: Var,
    /// `P × d_z` attended patch features.
    pub attended: Var,
    /// `P × d_z` fused features.
    pub fused: Var,
}

impl CrossAttention {
    pub fn init(
        store: &mut ParameterStore,
        prefix: &str,
        d_v: usize,
        d_z: usize,
        d_k: usize,
        n_heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let dk = d_k / n_heads;
        let dz = d_z / n_heads;
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            heads.push(Head {
                query: Linear::init(store, &format!("{prefix}.h{h}.query"), d_v, dk, false, rng)?,
                key: Linear::init(store, &format!("{prefix}.h{h}.key"), d_v, dk, false, rng)?,
                value: Linear::init(store, &format!("{prefix}.h{h}.value"), d_v, dz, false, rng)?,
                scale: 1.0 / (dk as f64).sqrt(),
            });
        }
        Ok(Self {
            heads,
            query_proj: Linear::init(store, &format!("{prefix}.query_proj"), d_v, d_z, true, rng)?,
            fuse: Linear::init(store, &format!("{prefix}.fuse"), 2 * d_z, d_z, true, rng)?,
        })
    }

    /// Query projection weight of head `h`.
    pub fn head_query(&self, h: usize) -> Linear {
        self.heads[h].query
    }

    pub fn head_value(&self, h: usize) -> Linear {
        self.heads[h].value
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    /// `gate` (`P × 1`), when given, scales each pathway's attention row
    /// before the attended features are formed; rows are not renormalised.
    pub fn apply(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        queries: Var,
        patches: Var,
        gate: Option<Var>,
    ) -> Result<CrossAttentionOutput> {
        if tape.value(patches).nrows() == 0 {
            return Err(Error::Shape("cross-attention over zero patches".into()));
        }
        let mut attn_sum: Option<Var> = None;
        let mut log_heads = Vec::with_capacity(self.heads.len());
        let mut attended_heads = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let q = head.query.apply(tape, store, queries)?;
            let k = head.key.apply(tape, store, patches)?;
            let v = head.value.apply(tape, store, patches)?;
            let kt = tape.transpose(k);
            let logits = tape.matmul(q, kt)?;
            let logits = tape.scale(logits, head.scale);
            let attn = tape.softmax_rows(logits)?;
            log_heads.push(tape.log_softmax_rows(logits)?);
            attn_sum = Some(match attn_sum {
                Some(s) => tape.add(s, attn)?,
                None => attn,
            });
            let weights = match gate {
                Some(g) => tape.mul_col(attn, g)?,
                None => attn,
            };
            attended_heads.push(tape.matmul(weights, v)?);
        }
        let n_heads = self.heads.len() as f64;
        let attention = attn_sum.expect("at least one head");
        let attention = if self.heads.len() > 1 {
            tape.scale(attention, 1.0 / n_heads)
        } else {
            attention
        };
        let log_attention = if log_heads.len() == 1 {
            log_heads[0]
        } else {
            log_mean_exp(tape, &log_heads)?
        };
        let mut attended = attended_heads[0];
        for &h in &attended_heads[1..] {
            attended = tape.concat_cols(attended, h)?;
        }
        let projected = self.query_proj.apply(tape, store, queries)?;
        let joined = tape.concat_cols(attended, projected)?;
        let fused = self.fuse.apply(tape, store, joined)?;
        Ok(CrossAttentionOutput {
            attention,
            log_attention,
            attended,
            fused,
        })
    }
}

/// `ln(mean_h exp(x_h))` elementwise over equally shaped inputs.
fn log_mean_exp(tape: &mut Tape, xs: &[Var]) -> Result<Var> {
    let vals: Vec<_> = xs.iter().map(|&x| tape.value(x).clone()).collect();
    let dim = vals[0].dim();
    if vals.iter().any(|v| v.dim() != dim) {
        return Err(Error::Shape("log-mean-exp over differently shaped inputs".into()));
    }
    let ln_h = (vals.len() as f64).ln();
    let value = ndarray::Array2::from_shape_fn(dim, |ix| {
        let m = vals.iter().map(|v| v[ix]).fold(f64::NEG_INFINITY, f64::max);
        m + vals.iter().map(|v| (v[ix] - m).exp()).sum::<f64>().ln() - ln_h
    });
    let out = value.clone();
    Ok(tape.custom(
        xs,
        value,
        Box::new(move |_, _, g| {
            // d/dx_h = exp(x_h) / Σ exp(x_j) = exp(x_h − ln H − out)
            vals.iter()
                .map(|v| ndarray::Array2::from_shape_fn(dim, |ix| g[ix] * (v[ix] - ln_h - out[ix]).exp()))
                .collect()
        }),
    ))
}

/// Gated attention pooling over the rows of a `K × d` matrix:
/// `softmax_k(wᵀ(tanh(U f_k) ⊙ sigmoid(G f_k)))`.
#[derive(Clone, Debug)]
pub struct GatedPool {
    pub tanh_branch: Linear,
    pub gate_branch: Linear,
    pub score: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct PoolOutput {
    /// `1 × d`.
    pub pooled: Var,
    /// `1 × K`, sums to one.
    pub weights: Var,
}

impl GatedPool {
    pub fn init(
        store: &mut ParameterStore,
        prefix: &str,
        d_in: usize,
        d_attn: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            tanh_branch: Linear::init(store, &format!("{prefix}.tanh"), d_in, d_attn, true, rng)?,
            gate_branch: Linear::init(store, &format!("{prefix}.gate"), d_in, d_attn, true, rng)?,
            score: Linear::init(store, &format!("{prefix}.score"), d_attn, 1, true, rng)?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParameterStore, rows: Var) -> Result<PoolOutput> {
        let a = self.tanh_branch.apply(tape, store, rows)?;
        let a = tape.tanh(a);
        let b = self.gate_branch.apply(tape, store, rows)?;
        let b = tape.sigmoid(b);
        let gated = tape.mul(a, b)?;
        let scores = self.score.apply(tape, store, gated)?;
        let scores = tape.transpose(scores);
        let weights = tape.softmax_rows(scores)?;
        let pooled = tape.matmul(weights, rows)?;
        Ok(PoolOutput { pooled, weights })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::SeedableRng;

    fn pool() -> (ParameterStore, GatedPool) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParameterStore::new();
        let p = GatedPool::init(&mut store, "pool", 3, 4, &mut rng).unwrap();
        (store, p)
    }

    #[test]
    fn single_row_pools_to_itself() {
        let (store, p) = pool();
        let mut tape = Tape::new();
        let f = tape.constant(array![[1.0, -2.0, 0.5]]);
        let out = p.apply(&mut tape, &store, f).unwrap();
        assert_eq!(tape.value(out.weights), &array![[1.0]]);
        assert_eq!(tape.value(out.pooled), &array![[1.0, -2.0, 0.5]]);
    }

    #[test]
    fn identical_rows_pool_to_the_row() {
        let (store, p) = pool();
        let mut tape = Tape::new();
        let f = tape.constant(Array2::from_shape_fn((4, 3), |(_, j)| j as f64 - 0.3));
        let out = p.apply(&mut tape, &store, f).unwrap();
        for (j, v) in tape.value(out.pooled).iter().enumerate() {
            assert!((v - (j as f64 - 0.3)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_score_weights_are_uniform() {
        let (mut store, p) = pool();
        store.value_mut(p.score.weight).fill(0.0);
        let mut tape = Tape::new();
        let f = tape.constant(Array2::from_shape_fn((5, 3), |(i, j)| (i * j) as f64));
        let out = p.apply(&mut tape, &store, f).unwrap();
        for &w in tape.value(out.weights) {
            assert!((w - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn single_key_attention_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParameterStore::new();
        let ca = CrossAttention::init(&mut store, "x", 4, 4, 4, 1, &mut rng).unwrap();
        let mut tape = Tape::new();
        let q = tape.constant(Array2::from_shape_fn((3, 4), |(i, j)| (i + j) as f64 * 0.2));
        let k = tape.constant(array![[0.3, -0.1, 0.8, 1.0]]);
        let out = ca.apply(&mut tape, &store, q, k, None).unwrap();
        assert_eq!(tape.value(out.attention), &Array2::<f64>::ones((3, 1)));
        let v = array![[0.3, -0.1, 0.8, 1.0]].dot(store.value(ca.head_value(0).weight));
        for row in tape.value(out.attended).rows() {
            for (a, b) in row.iter().zip(v.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_query_weights_give_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParameterStore::new();
        let ca = CrossAttention::init(&mut store, "x", 4, 4, 4, 1, &mut rng).unwrap();
        store.value_mut(ca.head_query(0).weight).fill(0.0);
        let mut tape = Tape::new();
        let q = tape.constant(Array2::from_elem((2, 4), 0.7));
        let k = tape.constant(Array2::from_shape_fn((5, 4), |(i, j)| (i as f64) - j as f64));
        let out = ca.apply(&mut tape, &store, q, k, None).unwrap();
        for &a in tape.value(out.attention) {
            assert!((a - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_head_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParameterStore::new();
        let ca = CrossAttention::init(&mut store, "x", 6, 8, 4, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let q = tape.constant(Array2::from_shape_fn((3, 6), |(i, j)| ((i * 7 + j) % 5) as f64 - 2.0));
        let k = tape.constant(Array2::from_shape_fn((4, 6), |(i, j)| ((i * 3 + j) % 4) as f64 * 0.5));
        let out = ca.apply(&mut tape, &store, q, k, None).unwrap();
        for row in tape.value(out.attention).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert_eq!(tape.value(out.fused).dim(), (3, 8));
    }
}
