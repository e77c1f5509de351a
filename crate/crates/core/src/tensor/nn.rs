//! Affine layers, MLPs and layer normalization on top of the tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
}

/// `x · W + b` with `W: in × out` and `b: out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Glorot-uniform weights in ±√(6/(fan_in+fan_out)), zero bias.
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..=limit)).collect();
        let weight = store.insert(format!("{name}.weight"), Tensor::matrix(fan_in, fan_out, w));
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self { weight, bias, fan_in, fan_out }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

/// Stack of affine layers with an activation between consecutive layers.
/// The last layer is affine only.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `widths = [in, hidden.., out]`.
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], activation: Activation, rng: &mut impl Rng) -> Self {
        assert!(widths.len() >= 2, "an mlp needs at least input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, activation }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        mlp(tape, store, x, &self.layers, self.activation)
    }
}

/// Alternating affine + activation over `layers`; the final layer is affine only.
pub fn mlp(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    layers: &[Linear],
    activation: Activation,
) -> Result<Var, TensorError> {
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        let got = *tape.shape(h).last().unwrap_or(&0);
        if got != layer.fan_in {
            return Err(TensorError::MlpChain { layer: i, expected: layer.fan_in, got });
        }
        h = layer.forward(tape, store, h)?;
        if i + 1 < layers.len() && activation == Activation::Relu {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.insert(format!("{name}.gamma"), Tensor::full(&[dim], 1.0));
        let beta = store.insert(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, Self::EPS)
    }
}
