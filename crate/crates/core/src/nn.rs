//! Fully connected layers and small MLPs built on the autodiff tape.

use rand::Rng;

use crate::autodiff::{Gradients, Graph, Var};
use crate::tensor::{Tensor, TensorError};

/// `y = x W + b`, with `W` stored as `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform(-s, s) init with `s = 1/sqrt(fan_in)` for weight and bias.
    pub fn new<G: Rng + ?Sized>(input: usize, output: usize, rng: &mut G) -> Self {
        let s = 1.0 / (input.max(1) as f64).sqrt();
        Self {
            weight: Tensor::uniform(input, output, s, rng).with_requires_grad(),
            bias: Tensor::uniform(1, output, s, rng).with_requires_grad(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var, TensorError> {
        let xw = g.matmul(x, self.weight)?;
        g.add(xw, self.bias)
    }
}

/// Linear layers with relu between them; the last layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

#[derive(Debug, Clone)]
pub struct MlpVars {
    layers: Vec<LinearVars>,
}

impl Mlp {
    /// `dims = [in, hidden..., out]`.
    pub fn new<G: Rng + ?Sized>(dims: &[usize], rng: &mut G) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let layers = dims.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::output_dim)
    }

    /// Records the parameters on `g`. With `trainable == false` they are
    /// constants and receive no gradient.
    pub fn bind(&self, g: &Graph, trainable: bool) -> MlpVars {
        let record = |t: &Tensor| if trainable { g.param(t) } else { g.constant(t.clone()) };
        MlpVars {
            layers: self
                .layers
                .iter()
                .map(|l| LinearVars {
                    weight: record(&l.weight),
                    bias: record(&l.bias),
                })
                .collect(),
        }
    }

    /// Adds the gradients of the bound vars into the parameter buffers.
    /// Unreachable parameters receive a zero gradient.
    pub fn absorb(&mut self, grads: &Gradients, vars: &MlpVars) -> Result<(), TensorError> {
        for (layer, v) in self.layers.iter_mut().zip(&vars.layers) {
            absorb_one(&mut layer.weight, grads, v.weight)?;
            absorb_one(&mut layer.bias, grads, v.bias)?;
        }
        Ok(())
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    /// Graph-free evaluation.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        let g = Graph::new();
        let vars = self.bind(&g, false);
        let input = g.constant(x.clone());
        let out = vars.forward(&g, input)?;
        Ok(g.value(out))
    }
}

impl MlpVars {
    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var, TensorError> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

pub(crate) fn absorb_one(t: &mut Tensor, grads: &Gradients, v: Var) -> Result<(), TensorError> {
    match grads.get(v) {
        Some(grad) => t.accumulate_grad(grad),
        None => t.accumulate_grad(&Tensor::zeros(t.rows(), t.cols())),
    }
}
