use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Raw density outputs are clamped to this band before exponentiation so the
/// activation stays finite whatever the optimizer does.
pub const EXP_CLAMP: f32 = 15.0;

/// Output activation of an [`Mlp`]. Hidden layers are always rectified.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    /// Logistic sigmoid; used by the color head so outputs lie in (0,1).
    Sigmoid,
    /// `scale * exp(clamp(x, -15, 15))`; used by the density head. The scale
    /// factor realizes density scaling inside the activation, so the
    /// derivative keeps the same shape: d/dx = output (inside the clamp).
    ExpScaled { scale: f32 },
}

impl Activation {
    fn apply(&self, x: f32) -> f32 {
        match *self {
            Activation::Identity => x,
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::ExpScaled { scale } => scale * x.clamp(-EXP_CLAMP, EXP_CLAMP).exp(),
        }
    }

    /// Derivative expressed in terms of the pre-activation `x` and the
    /// already-computed output `y`.
    fn grad(&self, x: f32, y: f32) -> f32 {
        match *self {
            Activation::Identity => 1.0,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::ExpScaled { .. } => {
                if (-EXP_CLAMP..=EXP_CLAMP).contains(&x) {
                    y
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    /// Weights, `out_dim x in_dim`, row-major.
    pub w: Array2<f32>,
    pub b: Array1<f32>,
}

/// A fixed-topology multilayer perceptron: rectified hidden layers and a
/// configurable output activation.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Layer>,
    output: Activation,
}

/// Everything `backward` needs from one forward batch: the layer inputs and
/// the output-layer pre-activations/outputs.
#[derive(Debug, Clone)]
pub struct MlpTape {
    /// `inputs[k]` is the input to layer `k` (post-activation of layer k-1);
    /// `inputs[0]` is the network input. Length = layer count.
    inputs: Vec<Array2<f32>>,
    out_pre: Array2<f32>,
    out_post: Array2<f32>,
}

impl MlpTape {
    pub fn batch_len(&self) -> usize {
        self.out_pre.nrows()
    }
}

/// Per-layer parameter gradients, shape-aligned with [`Mlp`] parameters.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub layers: Vec<Layer>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        MlpGrads {
            layers: mlp
                .layers
                .iter()
                .map(|l| Layer {
                    w: Array2::zeros(l.w.dim()),
                    b: Array1::zeros(l.b.len()),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w += &b.w;
            a.b += &b.b;
        }
    }

    pub fn tensors(&self) -> Vec<&[f32]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            out.push(l.w.as_slice().expect("contiguous"));
            out.push(l.b.as_slice().expect("contiguous"));
        }
        out
    }
}

impl Mlp {
    /// Build a network with the given layer sizes, e.g. `[16, 64, 1]` for one
    /// hidden layer of width 64. Weights are initialized uniformly in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` from the seed; biases start at 0.
    pub fn new(dims: &[usize], output: Activation, seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::config("mlp needs at least input and output dims"));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::config("mlp layer dims must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|d| {
                let (fan_in, fan_out) = (d[0], d[1]);
                let bound = 1.0 / (fan_in as f32).sqrt();
                let w = Array2::from_shape_fn((fan_out, fan_in), |_| {
                    rng.gen_range(-bound..=bound)
                });
                Layer {
                    w,
                    b: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Mlp { layers, output })
    }

    /// Build from explicit layer matrices. Consecutive dimensions must chain.
    pub fn from_layers(layers: Vec<Layer>, output: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("mlp needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].w.nrows() != pair[1].w.ncols() {
                return Err(Error::config(format!(
                    "layer dims do not chain: {} out vs {} in",
                    pair[0].w.nrows(),
                    pair[1].w.ncols()
                )));
            }
        }
        for l in &layers {
            if l.b.len() != l.w.nrows() {
                return Err(Error::config("bias length must equal weight rows"));
            }
        }
        Ok(Mlp { layers, output })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.nrows()
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Total number of weight and bias elements.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Disjoint mutable views of every parameter tensor, in a fixed order
    /// (w0, b0, w1, b1, ...). The order matches [`MlpGrads::tensors`].
    pub fn param_tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in self.layers.iter_mut() {
            out.push(l.w.as_slice_mut().expect("contiguous"));
            out.push(l.b.as_slice_mut().expect("contiguous"));
        }
        out
    }

    pub fn param_tensors(&self) -> Vec<&[f32]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            out.push(l.w.as_slice().expect("contiguous"));
            out.push(l.b.as_slice().expect("contiguous"));
        }
        out
    }

    /// Forward a batch (rows are samples). Returns the outputs and the tape
    /// needed for `backward`.
    pub fn forward(&self, x: ArrayView2<f32>) -> Result<(Array2<f32>, MlpTape)> {
        if x.ncols() != self.input_dim() {
            return Err(Error::config(format!(
                "input width {} does not match first layer in-dim {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let n_layers = self.layers.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut cur = x.to_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut pre = cur.dot(&layer.w.t());
            pre += &layer.b;
            inputs.push(cur);
            if k + 1 < n_layers {
                pre.mapv_inplace(|v| v.max(0.0));
                cur = pre;
            } else {
                let post = pre.mapv(|v| self.output.apply(v));
                return Ok((
                    post.clone(),
                    MlpTape {
                        inputs,
                        out_pre: pre,
                        out_post: post,
                    },
                ));
            }
        }
        unreachable!("loop always returns at the last layer")
    }

    /// Reverse pass. `dy` holds gradients w.r.t. the outputs of the forward
    /// batch recorded in `tape`. Returns parameter gradients and gradients
    /// w.r.t. the network inputs (needed to reach the feature tables).
    pub fn backward(&self, tape: &MlpTape, dy: ArrayView2<f32>) -> Result<(MlpGrads, Array2<f32>)> {
        if dy.dim() != tape.out_post.dim() {
            return Err(Error::usage(format!(
                "output gradient shape {:?} does not match recorded forward {:?}",
                dy.dim(),
                tape.out_post.dim()
            )));
        }
        let n_layers = self.layers.len();
        let mut grads = MlpGrads::zeros_like(self);

        // Output activation.
        let mut dpre = Array2::from_shape_fn(dy.raw_dim(), |(i, j)| {
            dy[(i, j)] * self.output.grad(tape.out_pre[(i, j)], tape.out_post[(i, j)])
        });

        for k in (0..n_layers).rev() {
            let layer = &self.layers[k];
            let input = &tape.inputs[k];
            grads.layers[k].w = dpre.t().dot(input);
            grads.layers[k].b = dpre.sum_axis(Axis(0));
            let dx = dpre.dot(&layer.w);
            if k == 0 {
                return Ok((grads, dx));
            }
            // Rectifier mask: the stored input of layer k is the
            // post-activation of layer k-1.
            dpre = dx;
            dpre.zip_mut_with(&tape.inputs[k], |g, &h| {
                if h <= 0.0 {
                    *g = 0.0;
                }
            });
        }
        unreachable!("loop returns at layer 0")
    }
}
