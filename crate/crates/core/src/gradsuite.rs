//! Finite-difference checks of every differentiable op, layer and loss
//! over randomized shapes.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::datamodel::TaskLabel;
use crate::error::Result;
use crate::losses::{
    loss_attention_align, loss_attention_align_log, loss_classification, loss_reconstruction, loss_representation, loss_survival,
    soft_cross_entropy, total_on_tape,
};
use crate::model::{AbmilNetwork, CrossAttention, GatedPool, LupiNetwork, ModelConfig, PathwayEncoders, PseudoPathwayRegressor, ReEmbed};
use crate::numerics::{
    check_gradients, dropout, mlp_apply, Activation, Context, GradCheckReport, Linear, Mat, ParameterStore, Tape, Var,
};
use crate::trainer::{lupi_losses, PreparedCase};

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteConfig {
    pub trials: usize,
    pub seed: u64,
    pub tolerance: f64,
    /// Adds a case whose backward rule is deliberately wrong.
    pub inject_fault: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            trials: 20,
            seed: 0,
            tolerance: 1e-4,
            inject_fault: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpReport {
    pub name: &'static str,
    pub trials: usize,
    pub entries: usize,
    pub max_rel_error: f64,
    /// Worst entry, with the trial's shapes.
    pub worst: String,
    pub passed: bool,
}

type Case = fn(&mut ChaCha8Rng) -> Result<(GradCheckReport, String)>;

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=4)
}

fn mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-1.5..1.5))
}

/// Entries at least 0.1 away from zero, for ops with a kink there.
fn mat_away(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Array2::from_shape_fn((r, c), |_| {
        let m = rng.random_range(0.1..1.5);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn positive(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Array2::from_shape_fn((r, c), |_| rng.random_range(0.2..2.0))
}

fn reduce(t: &mut Tape, y: Var, w: &Mat) -> Result<Var> {
    let w = t.constant(w.clone());
    let m = t.mul(y, w)?;
    Ok(t.sum(m))
}

fn check<F>(store: &mut ParameterStore, inputs: &[Mat], build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParameterStore, &[Var]) -> Result<Var>,
{
    check_gradients(store, inputs, H, build)
}

/// Central-difference step.
pub const H: f64 = 1e-5;

macro_rules! unary_case {
    ($name:ident, $gen:ident, $op:ident) => {
        fn $name(rng: &mut ChaCha8Rng) -> Result<(GradCheckReport, String)> {
            let (r, c) = (dim(rng), dim(rng));
            let w = mat(rng, r, c);
            let x = $gen(rng, r, c);
            let rep = check(&mut ParameterStore::new(), &[x], |t, _, v| {
                let y = t.$op(v[0]);
                reduce(t, y, &w)
            })?;
            Ok((rep, format!("{r}x{c}")))
        }
    };
}

unary_case!(tanh, mat, tanh);
unary_case!(sigmoid, mat, sigmoid);
unary_case!(relu, mat_away, relu);
unary_case!(softplus, mat, softplus);
unary_case!(log, positive, log);
unary_case!(abs, mat_away, abs);

fn transpose(rng: &mut ChaCha8Rng) -> Result<(GradCheckReport, String)> {
    let (r, c) = (dim(rng), dim(rng));
    let w = mat(rng, c, r);
    let x = mat(rng, r, c);
    let rep = check(&mut ParameterStore::new(), &[x], |t, _, v| {
        let y = t.transpose(v[0]);
        reduce(t, y, &w)
    })?;
    Ok((rep, format!("{r}x{c}")))
}

macro_rules! binary_case {
    ($name:ident, $op:ident) => {
        fn $name(rng: &mut ChaCha8Rng) -> Result<(GradCheckReport, String)> {
            let (r, c) = (dim(rng), dim(rng));
            let w = mat(rng, r, c);
            let inputs = [mat(rng, r, c), mat(rng, r, c)];
            let rep = check(&mut ParameterStore::new(), &inputs, |t, _, v| {
                let y = t.$op(v[0], v[1])?;
                reduce(t, y, &w)
            })?;
            Ok((rep, format!("{r}x{c}")))
        }
    };
}

binary_case!(add, add);
binary_case!(sub, sub);
binary_case!(mul, mul);

fn matmul(rng: &mut ChaCha8Rng) -> Result<(GradCheckReport, String)> {
    let (r, k, c) = (dim(rng), dim(rng), dim(rng));
    let w = mat(rng, r, c);
    let inputs = [mat(rng, r, k), mat(rng, k, c)];
    let rep = check(&mut ParameterStore::new(), &inputs, |t, _, v| {
        let y = t.matmul(v[0], v[1])?;
        reduce(t, y, &w)
    })?;
    Ok((rep, format!("{r}x{k}·{k}x{c}")))
}

fn add_row(rng: &mut ChaCha8Rng) -> Result<(GradCheckReport, String)> {
    let (r, c) = (dim(rng), dim(rng));
    let w = mat(rng, r, c);
    let inputs = [mat(rng, r, c), mat(rng, 1, c)];
    let rep = check(&mut ParameterStore::new(), &inputs, |t, _, v| {
        let y = t.add_row(v[0], v[1])?;
        reduce(t, y, &w)
    })?;
    Ok((rep, format!("{r}x{c}")))
}

fn mul_col(rng: &mut ChaCha8Rng) -> Result<(GradCheckReport, String)> {
    let (r, c) = (dim(rng), dim(rng));
    let w = mat(rng, r, c);
    let inputs = [mat(rng, r, c), mat(rng, r, 1)];
    let rep = check(&mut ParameterStore::new(), &inputs, |t, _, v| {
        let y = t.mul_col(v[0], v[1])?;
        reduce(t, y, &w)
    })?;
    Ok((rep, format!("{r}x{c}")))
}

fn scale(rng: &mut ChaCha8Rng) -> Result<(GradCheckReport, String)> {
    let (r, c) = (dim(rng), dim(rng));
    let w = mat(rng, r, c);
    let k = rng.random_range(-2.0..2.0);
    let rep = check(&mut ParameterStore::new(), &[mat(rng, r, c)], |t, _, v| {
        let y = t.scale(v[0], k);
        reduce(t, y, &w)
    })?;
    Ok((rep, format!("{r}x{c}")))
}

fn softmax(rng: &mut ChaCha8Rng) -> Result<(GradCheckReport, String)> {
    let (r, c) = (dim(rng), dim(rng) + 1);
    let w = mat(rng, r, c);
    let rep = check(&mut ParameterStore::new(), &[mat(rng, r, c)], |t, _, v| {
        let y = t.softmax_rows(v[0])?;
        reduce(t, y, &w)
    })?;
    Ok((rep, format!("{r}x{c}")))
}

fn log_softmax(rng: &mut ChaCha8Rng) -> Result<(GradCheckReport, String)> {
    let (r, c) = (dim(rng), dim(rng) + 1);
    let w = mat(rng, r, c);
    let rep = check(&mut ParameterStore::new(), &[mat(rng, r, c)], |t, _, v| {
        let y = t.log_softmax_rows(v[0])?;
        reduce(t, y, &w)
    })?;
    Ok((rep, format!("{r}x{c}")))
}

fn norm_rows(rng: &mut ChaCha8Rng) -> Result<(GradCheckReport, String)> {
    let (r, c) = (dim(rng), dim(rng) + 1);
    let w = mat(rng, r, c);
    let rep = check(&mut ParameterStore::new(), &[mat(rng, r, c)], |t, _, v| {
        let y = t.norm_rows(v[0])?;
        reduce(t, y, &w)
    })?;
    Ok((rep, format!("{r}x{c}")))
}

fn slice_rows(rng: &mut ChaCha8Rng) -> Result<(GradCheckReport, String)> {
    let (r, c) = (dim(rng) + 1, dim(rng));
    let start = rng.random_range(0..r);
    let end = rng.random_range(start + 1..=r);
    let w = mat(rng, end - start, c);
    let rep = check(&mut ParameterStore::new(), &[mat(rng, r, c)], |t, _, v| {
        let y = t.slice_rows(v[0], start, end)?;
        reduce(t, y, &w)
    })?;
    Ok((rep, format!("{r}x{c}[{start}..{end}]")))
}

fn concat_rows(rng: &mut ChaCha8Rng) -> Result<(GradCheckReport, String)> {
    let (a, b, c) = (dim(rng), dim(rng), dim(rng));
    let w = mat(rng, a + b, c);
    let inputs = [mat(rng, a, c), mat(rng, b, c)];
    let rep = check(&mut ParameterStore::new(), &inputs, |t, _, v| {
        let y = t.concat_rows(&[v[0], v[1]])?;
        reduce(t, y, &w)
    })?;
    Ok((rep, format!("{a}+{b}x{c}")))
}

fn concat_cols(rng: &mut ChaCha8Rng) -> Result<(GradCheckReport, String)> {
    let (r, a, b) = (dim(rng), dim(rng), dim(rng));
    let w = mat(rng, r, a + b);
    let inputs = [mat(rng, r, a), mat(rng, r, b)];
    let rep = check(&mut ParameterStore::new(), &inputs, |t, _, v| {
        let y = t.concat_cols(v[0], v[1])?;
        reduce(t, y, &w)
    })?;
    Ok((rep, format!("{r}x{a}+{b}")))
}

fn sum(rng: &mut ChaCha8Rng) -> Result<(GradCheckReport, String)> {
    let (r, c) = (dim(rng), dim(rng));
    let rep = check(&mut ParameterStore::new(), &[mat(rng, r, c)], |t, _, v| {
        let y = t.tanh(v[0]);
        Ok(t.sum(y))
    })?;
    Ok((rep, format!("{r}x{c}")))
}

fn mean(rng: &mut ChaCha8Rng) -> Result<(GradCheckReport, String)> {
    let (r, c) = (dim(rng), dim(rng));
    let rep = check(&mut ParameterStore::new(), &[mat(rng, r, c)], |t, _, v| {
        let y = t.sigmoid(v[0]);
        Ok(t.mean(y))
    })?;
    Ok((rep, format!("{r}x{c}")))
}

fn row_linear(rng: &mut ChaCha8Rng) -> Result<(GradCheckReport, String)> {
    let (p, a, b) = (dim(rng), dim(rng), dim(rng));
    let w = mat(rng, p, b);
    let inputs = [mat(rng, p, a), mat(rng, p * a, b)];
    let rep = check(&mut ParameterStore::new(), &inputs, |t, _, v| {
        let y = t.row_linear(v[0], v[1])?;
        reduce(t, y, &w)
    })?;
    Ok((rep, format!("{p}x{a}→{b}")))
}

fn linear(rng: &mut ChaCha8Rng) -> Result<(GradCheckReport, String)> {
    let (n, i, o) = (dim(rng), dim(rng), dim(rng));
    let mut store = ParameterStore::new();
    let layer = Linear::init(&mut store, "lin", i, o, rng.random(), rng)?;
    let w = mat(rng, n, o);
    let rep = check(&mut store, &[mat(rng, n, i)], |t, s, v| {
        let y = layer.apply(t, s, v[0])?;
        reduce(t, y, &w)
    })?;
    Ok((rep, format!("{n}x{i}→{o}")))
}

fn dropout_case(rng: &mut ChaCha8Rng) -> Result<(GradCheckReport, String)> {
    let (r, c) = (dim(rng), dim(rng));
    let w = mat(rng, r, c);
    let seed: u64 = rng.random();
    let rep = check(&mut ParameterStore::new(), &[mat(rng, r, c)], |t, _, v| {
        let mut ctx = Context::train(ChaCha8Rng::seed_from_u64(seed));
        let y = dropout(t, v[0], 0.4, &mut ctx)?;
        reduce(t, y, &w)
    })?;
    Ok((rep, format!("{r}x{c}")))
}

fn mlp(rng: &mut ChaCha8Rng) -> Result<(GradCheckReport, String)> {
    let (n, i, hd, o) = (dim(rng), dim(rng), dim(rng), dim(rng));
    let mut store = ParameterStore::new();
    let layers = [
        Linear::init(&mut store, "l0", i, hd, true, rng)?,
        Linear::init(&mut store, "l1", hd, o, true, rng)?,
    ];
    let w = mat(rng, n, o);
    let rep = check(&mut store, &[mat(rng, n, i)], |t, s, v| {
        let y = mlp_apply(t, s, v[0], &layers, Activation::Tanh, 0.0, &mut Context::eval())?;
        reduce(t, y, &w)
    })?;
    Ok((rep, format!("{n}x{i}→{hd}→{o}")))
}

fn reembed(rng: &mut ChaCha8Rng) -> Result<(GradCheckReport, String)> {
    let (n, d, a) = (dim(rng) + 1, dim(rng), dim(rng));
    let regions = rng.random_range(1..=n);
    let mut store = ParameterStore::new();
    let layer = ReEmbed::init(&mut store, d, a, regions, rng)?;
    let w = mat(rng, n, d);
    let rep = check(&mut store, &[mat(rng, n, d)], |t, s, v| {
        let y = layer.apply(t, s, v[0])?;
        reduce(t, y, &w)
    })?;
    Ok((rep, format!("N={n} d={d} R={regions}")))
}

fn cross_attention(rng: &mut ChaCha8Rng) -> Result<(GradCheckReport, String)> {
    let (p, n, d) = (dim(rng), dim(rng), dim(rng));
    let heads = rng.random_range(1..=2);
    let (dz, dk) = (heads * dim(rng), heads * dim(rng));
    let mut store = ParameterStore::new();
    let layer = CrossAttention::init(&mut store, "x", d, dz, dk, heads, rng)?;
    let (wf, wa) = (mat(rng, p, dz), mat(rng, p, n));
    let inputs = [mat(rng, p, d), mat(rng, n, d), positive(rng, p, 1)];
    let rep = check(&mut store, &inputs, |t, s, v| {
        let out = layer.apply(t, s, v[0], v[1], Some(v[2]))?;
        let f = reduce(t, out.fused, &wf)?;
        let a = reduce(t, out.attention, &wa)?;
        t.add(f, a)
    })?;
    Ok((rep, format!("P={p} N={n} d={d} heads={heads}")))
}

fn gated_pool(rng: &mut ChaCha8Rng) -> Result<(GradCheckReport, String)> {
    let (k, d, a) = (dim(rng), dim(rng), dim(rng));
    let mut store = ParameterStore::new();
    let layer = GatedPool::init(&mut store, "pool", d, a, rng)?;
    let w = mat(rng, 1, d);
    let rep = check(&mut store, &[mat(rng, k, d)], |t, s, v| {
        let out = layer.apply(t, s, v[0])?;
        reduce(t, out.pooled, &w)
    })?;
    Ok((rep, format!("K={k} d={d}")))
}

fn pathway_encoders(rng: &mut ChaCha8Rng) -> Result<(GradCheckReport, String)> {
    let p = dim(rng);
    let sizes: Vec<usize> = (0..p).map(|_| dim(rng)).collect();
    let (hidden, d) = (dim(rng), dim(rng));
    let mut store = ParameterStore::new();
    let enc = PathwayEncoders::init(&mut store, &sizes, hidden, d, 0.0, rng)?;
    let subvectors: Vec<Vec<f64>> = sizes
        .iter()
        .map(|&g| (0..g).map(|_| rng.random_range(-1.5..1.5)).collect())
        .collect();
    let w = mat(rng, p, d);
    let rep = check(&mut store, &[], |t, s, _| {
        let y = enc.apply(t, s, &subvectors, &mut Context::eval())?;
        reduce(t, y, &w)
    })?;
    Ok((rep, format!("sizes={sizes:?} d={d}")))
}

fn pseudo_regressor(rng: &mut ChaCha8Rng) -> Result<(GradCheckReport, String)> {
    let (p, n, d, dz) = (dim(rng), dim(rng), dim(rng), dim(rng));
    let mut store = ParameterStore::new();
    let reg = PseudoPathwayRegressor::init(&mut store, p, d, dz, rng)?;
    let w = mat(rng, p, d);
    let rep = check(&mut store, &[mat(rng, n, d)], |t, s, v| {
        let y = reg.apply(t, s, v[0])?.embeddings;
        reduce(t, y, &w)
    })?;
    Ok((rep, format!("P={p} N={n} d={d}")))
}

fn soft_ce(rng: &mut ChaCha8Rng) -> Result<(GradCheckReport, String)> {
    let (r, c) = (dim(rng), dim(rng) + 1);
    let target = mat(rng, r, c);
    let rep = check(&mut ParameterStore::new(), &[mat(rng, r, c)], |t, _, v| {
        let tg = t.constant(target.clone());
        soft_cross_entropy(t, v[0], tg)
    })?;
    Ok((rep, format!("{r}x{c}")))
}

fn reconstruction(rng: &mut ChaCha8Rng) -> Result<(GradCheckReport, String)> {
    let (r, c) = (dim(rng), dim(rng) + 1);
    let z = mat(rng, r, c);
    // keep every |ẑ − z| clear of the ℓ1 kink
    let zhat = &z + &mat_away(rng, r, c);
    let rep = check(&mut ParameterStore::new(), &[zhat], |t, _, v| {
        let zc = t.constant(z.clone());
        loss_reconstruction(t, v[0], zc)
    })?;
    Ok((rep, format!("{r}x{c}")))
}

fn attention_align(rng: &mut ChaCha8Rng) -> Result<(GradCheckReport, String)> {
    let (r, c) = (dim(rng), dim(rng) + 1);
    let teacher = crate::numerics::softmax_rows(&mat(rng, r, c));
    let rep = check(&mut ParameterStore::new(), &[mat(rng, r, c)], |t, _, v| {
        let a = t.softmax_rows(v[0])?;
        let p = t.constant(teacher.clone());
        loss_attention_align(t, a, p)
    })?;
    Ok((rep, format!("{r}x{c}")))
}

fn attention_align_log(rng: &mut ChaCha8Rng) -> Result<(GradCheckReport, String)> {
    let (r, c) = (dim(rng), dim(rng) + 1);
    let teacher = crate::numerics::softmax_rows(&mat(rng, r, c));
    let rep = check(&mut ParameterStore::new(), &[mat(rng, r, c)], |t, _, v| {
        let a = t.log_softmax_rows(v[0])?;
        let p = t.constant(teacher.clone());
        loss_attention_align_log(t, a, p)
    })?;
    Ok((rep, format!("{r}x{c}")))
}

/// Multi-head attention with the log-space output in the objective.
fn cross_attention_log(rng: &mut ChaCha8Rng) -> Result<(GradCheckReport, String)> {
    let (p, n, d) = (dim(rng), dim(rng), dim(rng));
    let heads = rng.random_range(2..=3);
    let (dz, dk) = (heads * dim(rng), heads * dim(rng));
    let mut store = ParameterStore::new();
    let layer = CrossAttention::init(&mut store, "x", d, dz, dk, heads, rng)?;
    let w = mat(rng, p, n);
    let inputs = [mat(rng, p, d), mat(rng, n, d)];
    let rep = check(&mut store, &inputs, |t, s, v| {
        let out = layer.apply(t, s, v[0], v[1], None)?;
        reduce(t, out.log_attention, &w)
    })?;
    Ok((rep, format!("P={p} N={n} d={d} heads={heads}")))
}

fn representation(rng: &mut ChaCha8Rng) -> Result<(GradCheckReport, String)> {
    let c = dim(rng);
    let teacher = mat(rng, 1, c);
    let rep = check(&mut ParameterStore::new(), &[mat(rng, 1, c)], |t, _, v| {
        let p = t.constant(teacher.clone());
        loss_representation(t, v[0], p)
    })?;
    Ok((rep, format!("1x{c}")))
}

fn classification(rng: &mut ChaCha8Rng) -> Result<(GradCheckReport, String)> {
    let c = dim(rng) + 1;
    let label = rng.random_range(0..c);
    let rep = check(&mut ParameterStore::new(), &[mat(rng, 1, c)], |t, _, v| loss_classification(t, v[0], label))?;
    Ok((rep, format!("C={c} y={label}")))
}

fn survival(rng: &mut ChaCha8Rng) -> Result<(GradCheckReport, String)> {
    let k = dim(rng);
    let edges: Vec<f64> = (1..k).map(|i| 10.0 * i as f64).collect();
    let time = rng.random_range(0.0..10.0 * k as f64);
    let event = rng.random::<bool>();
    let mut store = ParameterStore::new();
    let head = store.add("head", mat_away(rng, 2, k))?;
    let rep = check(&mut store, &[mat(rng, 1, k)], |t, s, v| {
        let w = t.param(s, head);
        loss_survival(t, v[0], time, event, &edges, Some(w), 0.01)
    })?;
    Ok((rep, format!("K={k} t={time:.1} event={event}")))
}

fn total(rng: &mut ChaCha8Rng) -> Result<(GradCheckReport, String)> {
    let lambda = rng.random_range(0.0..2.0);
    let rep = check(&mut ParameterStore::new(), &[mat(rng, 1, 5)], |t, _, v| {
        let parts: Vec<Var> = (0..5)
            .map(|i| {
                let x = t.slice_rows(v[0], 0, 1)?;
                let s = t.softplus(x);
                let w = t.constant(Array2::from_shape_fn((1, 5), |(_, j)| f64::from(u8::from(i == j))));
                let m = t.mul(s, w)?;
                Ok(t.sum(m))
            })
            .collect::<Result<_>>()?;
        Ok(total_on_tape(t, parts[0], parts[1], parts[2], parts[3], parts[4], lambda)?.total)
    })?;
    Ok((rep, format!("lambda={lambda:.2}")))
}

fn tiny_model(rng: &mut ChaCha8Rng) -> ModelConfig {
    let p = dim(rng);
    let d_z = dim(rng);
    ModelConfig {
        d_v: dim(rng) + 1,
        d_z,
        d_k: rng.random_range(1..=d_z),
        pathway_hidden: dim(rng),
        pathway_sizes: (0..p).map(|_| dim(rng)).collect(),
        regions: rng.random_range(1..=3),
        dropout: 0.0,
        abmil_hidden: dim(rng),
        abmil_attn: dim(rng),
        ..ModelConfig::default()
    }
}

/// Supervised losses of both branches through the whole network. The
/// alignment terms stop gradients at the teacher, so they are weighted out.
fn lupi_network(rng: &mut ChaCha8Rng) -> Result<(GradCheckReport, String)> {
    let cfg = ModelConfig {
        lambda: 0.0,
        ..tiny_model(rng)
    };
    let cfg = ModelConfig {
        pathway_norm: rng.random_bool(0.5),
        ..cfg
    };
    let net = LupiNetwork::new(cfg.clone(), rng.random())?;
    let n = dim(rng) + 1;
    let bag = crate::datamodel::PatchBag::new("c", "s", mat(rng, n, cfg.d_v).mapv(|v| v as f32), None)?;
    let label = TaskLabel::classification(rng.random_range(0..2), 2)?;
    let record = crate::datamodel::CaseRecord::new("c", vec![bag], None, label)?;
    let subvectors = cfg
        .pathway_sizes
        .iter()
        .map(|&g| (0..g).map(|_| rng.random_range(-1.5..1.5)).collect())
        .collect();
    let case = PreparedCase {
        record,
        subvectors: Some(subvectors),
    };
    let mut store = net.store.clone();
    let rep = check(&mut store, &[], |t, s, _| {
        let mut probe = net.clone();
        probe.store = s.clone();
        Ok(lupi_losses(&probe, t, &case, &[], &crate::trainer::TrainConfig::default(), &mut Context::eval())?.total)
    })?;
    Ok((rep, format!("P={} N={n} d_v={}", cfg.pathway_sizes.len(), cfg.d_v)))
}

fn abmil_network(rng: &mut ChaCha8Rng) -> Result<(GradCheckReport, String)> {
    let cfg = tiny_model(rng);
    let net = AbmilNetwork::new(cfg.clone(), rng.random())?;
    let n = dim(rng);
    let x = mat(rng, n, cfg.d_v);
    let label = rng.random_range(0..2);
    let mut store = net.store.clone();
    let rep = check(&mut store, &[], |t, s, _| {
        let mut probe = net.clone();
        probe.store = s.clone();
        let out = probe.forward(t, &x, &mut Context::eval())?;
        loss_classification(t, out.logits, label)
    })?;
    Ok((rep, format!("N={n} d_v={}", cfg.d_v)))
}

/// `x²` whose backward rule returns `x` instead of `2x`.
fn faulty_square(rng: &mut ChaCha8Rng) -> Result<(GradCheckReport, String)> {
    let (r, c) = (dim(rng), dim(rng));
    let rep = check(&mut ParameterStore::new(), &[mat_away(rng, r, c)], |t, _, v| {
        let value = t.value(v[0]).mapv(|x| x * x);
        let y = t.custom(
            &[v[0]],
            value,
            Box::new(|inputs: &[&Mat], _out: &Mat, g: &Mat| vec![inputs[0] * g]),
        );
        Ok(t.sum(y))
    })?;
    Ok((rep, format!("{r}x{c}")))
}

pub const FAULT_CASE: &str = "faulty_square";

fn cases() -> Vec<(&'static str, Case)> {
    vec![
        ("matmul", matmul),
        ("add", add),
        ("sub", sub),
        ("mul", mul),
        ("add_row", add_row),
        ("mul_col", mul_col),
        ("scale", scale),
        ("transpose", transpose),
        ("tanh", tanh),
        ("sigmoid", sigmoid),
        ("relu", relu),
        ("softplus", softplus),
        ("log", log),
        ("abs", abs),
        ("softmax_rows", softmax),
        ("log_softmax_rows", log_softmax),
        ("slice_rows", slice_rows),
        ("concat_rows", concat_rows),
        ("concat_cols", concat_cols),
        ("sum", sum),
        ("mean", mean),
        ("row_linear", row_linear),
        ("linear", linear),
        ("dropout", dropout_case),
        ("mlp", mlp),
        ("reembed", reembed),
        ("cross_attention", cross_attention),
        ("gated_pool", gated_pool),
        ("pathway_encoders", pathway_encoders),
        ("pseudo_regressor", pseudo_regressor),
        ("soft_cross_entropy", soft_ce),
        ("loss_reconstruction", reconstruction),
        ("loss_attention_align", attention_align),
        ("loss_representation", representation),
        ("loss_classification", classification),
        ("loss_survival", survival),
        ("loss_total", total),
        ("lupi_network", lupi_network),
        ("abmil_network", abmil_network),
        ("loss_attention_align_log", attention_align_log),
        ("cross_attention_log", cross_attention_log),
        ("norm_rows", norm_rows),
    ]
}

pub fn case_names() -> Vec<&'static str> {
    cases().into_iter().map(|(n, _)| n).collect()
}

/// Runs every case for `cfg.trials` randomized shapes. Each case draws from
/// its own stream so adding a case leaves the others unchanged.
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<OpReport>> {
    let mut all = cases();
    if cfg.inject_fault {
        all.push((FAULT_CASE, faulty_square));
    }
    all.into_iter()
        .enumerate()
        .map(|(i, (name, case))| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let mut report = OpReport {
                name,
                trials: cfg.trials,
                entries: 0,
                max_rel_error: 0.0,
                worst: String::new(),
                passed: true,
            };
            for trial in 0..cfg.trials {
                let (rep, shape) = case(&mut rng)?;
                report.entries += rep.entries;
                if rep.max_rel_error >= report.max_rel_error || report.worst.is_empty() {
                    report.max_rel_error = rep.max_rel_error;
                    report.worst = format!("trial {trial} ({shape}) {}", rep.worst);
                }
            }
            report.passed = report.max_rel_error <= cfg.tolerance;
            Ok(report)
        })
        .collect()
}
