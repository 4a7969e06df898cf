//! Region-aware re-embedding: patches are split by index into contiguous
//! regions, and each region runs one self-attention layer whose output is
//! projected back to the input width and added residually.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{Linear, ParameterStore, Tape, Var};

/// `(start, end)` of each of `min(regions, n)` contiguous regions; sizes
/// differ by at most one, larger regions first.
pub fn region_bounds(n: usize, regions: usize) -> Vec<(usize, usize)> {
    let r = regions.min(n).max(1);
    let base = n / r;
    let extra = n % r;
    let mut out = Vec::with_capacity(r);
    let mut start = 0;
    for i in 0..r {
        let len = base + usize::from(i < extra);
        out.push((start, start + len));
        start += len;
    }
    out
}

#[derive(Clone, Debug)]
pub struct ReEmbed {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    /// Output projection back to `d_v`, no bias.
    pub out: Linear,
    pub regions: usize,
    scale: f64,
}

impl ReEmbed {
    pub fn init(
        store: &mut ParameterStore,
        d_v: usize,
        d_attn: usize,
        regions: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            query: Linear::init(store, "reembed.query", d_v, d_attn, false, rng)?,
            key: Linear::init(store, "reembed.key", d_v, d_attn, false, rng)?,
            value: Linear::init(store, "reembed.value", d_v, d_attn, false, rng)?,
            out: Linear::init(store, "reembed.out", d_attn, d_v, false, rng)?,
            regions,
            scale: 1.0 / (d_attn as f64).sqrt(),
        })
    }

    /// `N × d_v` → `N × d_v`.
    pub fn apply(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let n = tape.value(x).nrows();
        let q = self.query.apply(tape, store, x)?;
        let k = self.key.apply(tape, store, x)?;
        let v = self.value.apply(tape, store, x)?;
        let mut parts = Vec::new();
        for (start, end) in region_bounds(n, self.regions) {
            let vr = tape.slice_rows(v, start, end)?;
            if end - start == 1 {
                // A single token attends to itself with weight 1.
                parts.push(vr);
                continue;
            }
            let qr = tape.slice_rows(q, start, end)?;
            let kr = tape.slice_rows(k, start, end)?;
            let kt = tape.transpose(kr);
            let logits = tape.matmul(qr, kt)?;
            let logits = tape.scale(logits, self.scale);
            let attn = tape.softmax_rows(logits)?;
            parts.push(tape.matmul(attn, vr)?);
        }
        let attended = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
        let projected = self.out.apply(tape, store, attended)?;
        tape.add(x, projected)
    }
}
