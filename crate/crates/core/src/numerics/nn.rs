//! Layers built from tape ops: linear maps, MLPs and inverted dropout.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParameterStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Training context: carries the dropout RNG when training, nothing in eval.
#[derive(Debug)]
pub struct Context {
    rng: Option<ChaCha8Rng>,
}

impl Context {
    pub fn eval() -> Self {
        Self { rng: None }
    }

    pub fn train(rng: ChaCha8Rng) -> Self {
        Self { rng: Some(rng) }
    }

    pub fn is_train(&self) -> bool {
        self.rng.is_some()
    }

    pub fn into_rng(self) -> Option<ChaCha8Rng> {
        self.rng
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Linear => x,
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// Registers an `input × output` weight with PyTorch-style uniform
    /// initialisation `U(-1/√in, 1/√in)`.
    pub fn init(
        store: &mut ParameterStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let w = Array2::from_shape_fn((input, output), |_| rng.random_range(-bound..bound));
        let weight = store.add(format!("{name}.weight"), w)?;
        let bias = if bias {
            let b = Array2::from_shape_fn((1, output), |_| rng.random_range(-bound..bound));
            Some(store.add(format!("{name}.bias"), b)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn zeros(store: &mut ParameterStore, name: &str, input: usize, output: usize) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), Array2::zeros((input, output)))?;
        let bias = Some(store.add(format!("{name}.bias"), Array2::zeros((1, output)))?);
        Ok(Self { weight, bias })
    }

    pub fn input_dim(&self, store: &ParameterStore) -> usize {
        store.value(self.weight).nrows()
    }

    pub fn output_dim(&self, store: &ParameterStore) -> usize {
        store.value(self.weight).ncols()
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Inverted dropout: kept entries are scaled by `1/(1-rate)` at train time;
/// identity in eval.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, ctx: &mut Context) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid("dropout", format!("rate {rate} outside [0, 1)")));
    }
    let Some(rng) = ctx.rng.as_mut() else {
        return Ok(x);
    };
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let mask = Array2::from_shape_fn(tape.value(x).dim(), |_| {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            keep
        }
    });
    let mask = tape.constant(mask);
    tape.mul(x, mask)
}

/// Applies `layers` in order with `activation` and dropout between layers;
/// the last layer is linear.
pub fn mlp_apply(
    tape: &mut Tape,
    store: &ParameterStore,
    x: Var,
    layers: &[Linear],
    activation: Activation,
    dropout_rate: f64,
    ctx: &mut Context,
) -> Result<Var> {
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        let cols = tape.value(h).ncols();
        let expected = layer.input_dim(store);
        if cols != expected {
            return Err(Error::Shape(format!(
                "mlp layer {i} expects {expected} inputs, got {cols}"
            )));
        }
        h = layer.apply(tape, store, h)?;
        if i + 1 < layers.len() {
            h = activation.apply(tape, h);
            h = dropout(tape, h, dropout_rate, ctx)?;
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn identity_mlp_returns_input() {
        let mut store = ParameterStore::new();
        let mut layers = Vec::new();
        for i in 0..2 {
            let weight = store.add(format!("l{i}.w"), Array2::eye(3)).unwrap();
            let bias = Some(store.add(format!("l{i}.b"), Array2::zeros((1, 3))).unwrap());
            layers.push(Linear { weight, bias });
        }
        let mut tape = Tape::new();
        let x = tape.constant(array![[1.0, -2.0, 3.5]]);
        let y = mlp_apply(&mut tape, &store, x, &layers, Activation::Linear, 0.0, &mut Context::eval()).unwrap();
        assert_eq!(tape.value(y), &array![[1.0, -2.0, 3.5]]);
    }

    #[test]
    fn single_layer_affine() {
        let mut store = ParameterStore::new();
        let weight = store.add("w", array![[2.0]]).unwrap();
        let bias = Some(store.add("b", array![[1.0]]).unwrap());
        let mut tape = Tape::new();
        let x = tape.constant(array![[3.0]]);
        let y = mlp_apply(
            &mut tape,
            &store,
            x,
            &[Linear { weight, bias }],
            Activation::Relu,
            0.0,
            &mut Context::eval(),
        )
        .unwrap();
        assert_eq!(tape.value(y), &array![[7.0]]);
    }

    #[test]
    fn eval_dropout_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParameterStore::new();
        let l1 = Linear::init(&mut store, "a", 4, 8, true, &mut rng).unwrap();
        let l2 = Linear::init(&mut store, "b", 8, 2, true, &mut rng).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let x = tape.constant(array![[0.1, 0.2, -0.3, 0.4]]);
            let y = mlp_apply(&mut tape, &store, x, &[l1, l2], Activation::Relu, 0.25, &mut Context::eval()).unwrap();
            tape.value(y).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn train_dropout_uses_inverted_scaling() {
        let mut tape = Tape::new();
        let x = tape.constant(Array2::ones((1, 4000)));
        let mut ctx = Context::train(ChaCha8Rng::seed_from_u64(1));
        let y = dropout(&mut tape, x, 0.25, &mut ctx).unwrap();
        let v = tape.value(y);
        assert!(v.iter().all(|&e| e == 0.0 || (e - 1.0 / 0.75).abs() < 1e-12));
        let mean = v.mean().unwrap();
        assert!((mean - 1.0).abs() < 0.05);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut store = ParameterStore::new();
        let weight = store.add("w", Array2::zeros((3, 2))).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Array2::zeros((1, 4)));
        let err = mlp_apply(
            &mut tape,
            &store,
            x,
            &[Linear { weight, bias: None }],
            Activation::Relu,
            0.0,
            &mut Context::eval(),
        );
        assert!(matches!(err, Err(Error::Shape(_))));
    }
}
