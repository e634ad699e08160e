//! Minimal dense-network building blocks with analytic gradients.
//!
//! Both the learned expert and the routing function are stacks of
//! [`DenseLayer`]s over `f64` slices. Forward passes can record the
//! activations needed for an exact backward pass; updates are plain gradient
//! descent. Everything is deterministic given the seed used at init time.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the layer output `y = f(z)`.
    #[inline]
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Checkpoint(format!("unknown activation `{other}`"))),
        }
    }
}

/// Fully connected layer, weights row-major `(out_dim, in_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    /// Uniform init in `+/- 1/sqrt(in_dim)`.
    pub fn init(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let bias = vec![0.0; out_dim];
        Self {
            in_dim,
            out_dim,
            weights,
            bias,
            activation,
        }
    }

    /// All-zero layer; used for output heads so fresh models predict zero.
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    fn forward(&self, input: &[f64], out: &mut Vec<f64>) {
        debug_assert_eq!(input.len(), self.in_dim);
        out.clear();
        for o in 0..self.out_dim {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let mut z = self.bias[o];
            for (w, x) in row.iter().zip(input) {
                z += w * x;
            }
            out.push(self.activation.apply(z));
        }
    }
}

/// A stack of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

/// Activations recorded by [`Mlp::forward_traced`]: `acts[0]` is the input,
/// `acts[i + 1]` the output of layer `i`.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    acts: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace holds at least the input")
    }
}

/// Parameter gradients matching an [`Mlp`] layer for layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub layers: Vec<LayerGrad>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub d_weights: Vec<f64>,
    pub d_bias: Vec<f64>,
}

impl MlpGrad {
    pub fn accumulate(&mut self, other: &MlpGrad) {
        debug_assert_eq!(self.layers.len(), other.layers.len());
        for (mine, theirs) in self.layers.iter_mut().zip(&other.layers) {
            for (a, b) in mine.d_weights.iter_mut().zip(&theirs.d_weights) {
                *a += b;
            }
            for (a, b) in mine.d_bias.iter_mut().zip(&theirs.d_bias) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for layer in &mut self.layers {
            for v in &mut layer.d_weights {
                *v *= factor;
            }
            for v in &mut layer.d_bias {
                *v *= factor;
            }
        }
    }
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Self {
        debug_assert!(!layers.is_empty());
        for pair in layers.windows(2) {
            debug_assert_eq!(pair[0].out_dim, pair[1].in_dim);
        }
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().expect("mlp has layers").in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("mlp has layers").out_dim
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut cur = input.to_vec();
        let mut next = Vec::new();
        for layer in &self.layers {
            layer.forward(&cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    pub fn forward_traced(&self, input: &[f64]) -> MlpTrace {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.to_vec());
        for layer in &self.layers {
            let mut out = Vec::new();
            layer.forward(acts.last().expect("non-empty"), &mut out);
            acts.push(out);
        }
        MlpTrace { acts }
    }

    /// Backpropagate `d_output` through the trace. Returns parameter
    /// gradients and the gradient with respect to the input.
    pub fn backward(&self, trace: &MlpTrace, d_output: &[f64]) -> (MlpGrad, Vec<f64>) {
        debug_assert_eq!(trace.acts.len(), self.layers.len() + 1);
        debug_assert_eq!(d_output.len(), self.output_dim());

        let mut grads = Vec::with_capacity(self.layers.len());
        let mut d_cur = d_output.to_vec();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.acts[idx];
            let output = &trace.acts[idx + 1];

            // dz = dy * f'(y)
            let dz: Vec<f64> = d_cur
                .iter()
                .zip(output)
                .map(|(dy, &y)| dy * layer.activation.grad_from_output(y))
                .collect();

            let mut d_weights = vec![0.0; layer.in_dim * layer.out_dim];
            for (o, row) in d_weights.chunks_mut(layer.in_dim).enumerate() {
                for (dw, x) in row.iter_mut().zip(input) {
                    *dw = dz[o] * x;
                }
            }

            let mut d_input = vec![0.0; layer.in_dim];
            for (o, row) in layer.weights.chunks(layer.in_dim).enumerate() {
                for (di, w) in d_input.iter_mut().zip(row) {
                    *di += dz[o] * w;
                }
            }

            grads.push(LayerGrad {
                d_weights,
                d_bias: dz,
            });
            d_cur = d_input;
        }
        grads.reverse();
        (MlpGrad { layers: grads }, d_cur)
    }

    /// Zero-filled gradient buffer matching this network.
    pub fn zero_grad(&self) -> MlpGrad {
        MlpGrad {
            layers: self
                .layers
                .iter()
                .map(|l| LayerGrad {
                    d_weights: vec![0.0; l.weights.len()],
                    d_bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    /// One in-place gradient-descent step.
    pub fn step(&mut self, grad: &MlpGrad, lr: f64) {
        debug_assert_eq!(self.layers.len(), grad.layers.len());
        for (layer, g) in self.layers.iter_mut().zip(&grad.layers) {
            for (w, dw) in layer.weights.iter_mut().zip(&g.d_weights) {
                *w -= lr * dw;
            }
            for (b, db) in layer.bias.iter_mut().zip(&g.d_bias) {
                *b -= lr * db;
            }
        }
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Flatten every parameter into one vector (weights then bias per layer).
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for layer in &self.layers {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    /// Inverse of [`Mlp::flatten_params`].
    pub fn assign_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params());
        let mut offset = 0;
        for layer in &mut self.layers {
            let w_len = layer.weights.len();
            layer.weights.copy_from_slice(&flat[offset..offset + w_len]);
            offset += w_len;
            let b_len = layer.bias.len();
            layer.bias.copy_from_slice(&flat[offset..offset + b_len]);
            offset += b_len;
        }
    }

    pub fn validate_finite(&self) -> Result<()> {
        for layer in &self.layers {
            if layer.weights.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
                return Err(Error::validation("network weight is not finite"));
            }
        }
        Ok(())
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Numerically stable `log(sum(exp(logits)))`.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}
