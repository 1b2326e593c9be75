//! Multi-layer perceptrons with hand-written backpropagation.
//!
//! Each layer computes `y = act(norm(x Wᵀ + b))`, where `norm` is an optional
//! non-affine layer normalization over the layer's outputs. Weights are
//! stored `(out, in)` row-major. Batched passes take one sample per row.

use serde::{Deserialize, Serialize};

use super::matrix::{gemm, Matrix};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Elu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Elu => {
                if z > 0.0 {
                    z
                } else {
                    z.exp_m1()
                }
            }
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative given the pre-activation `z` and output `y`.
    #[inline]
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Elu => {
                if z > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// Shape `(out_dim, in_dim)`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
    #[serde(default)]
    pub layer_norm: bool,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Architecture description, enough to rebuild a zeroed network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(rename = "in")]
    pub in_dim: usize,
    #[serde(rename = "out")]
    pub out_dim: usize,
    pub activation: Activation,
    #[serde(default)]
    pub layer_norm: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

/// Gradients congruent to an [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            weights: params
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.out_dim(), l.in_dim()))
                .collect(),
            biases: params.layers.iter().map(|l| vec![0.0; l.out_dim()]).collect(),
        }
    }

    /// Flat views in the same order as [`MlpParams::tensors_mut`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.weights.len() * 2);
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.data());
            out.push(b.as_slice());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.weights.len() * 2);
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.data_mut());
            out.push(b.as_mut_slice());
        }
        out
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Activations recorded by [`MlpParams::forward_cached`] for a backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[l]` is the input to layer `l`; the final entry is the output.
    inputs: Vec<Matrix>,
    /// Pre-activation values (after normalization when enabled).
    pre: Vec<Matrix>,
    /// Per-row inverse standard deviation for normalized layers.
    inv_std: Vec<Option<Vec<f64>>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        self.inputs.last().expect("cache always holds the input")
    }

    pub fn input(&self) -> &Matrix {
        &self.inputs[0]
    }
}

impl MlpParams {
    /// Builds a network with `sizes = [in, h1, ..., out]`, `hidden` activations
    /// on every layer except the last, which uses `output`.
    ///
    /// Weights and biases are drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        layer_norm_hidden: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let specs = Self::specs_for(sizes, hidden, output, layer_norm_hidden)?;
        let mut net = Self::zeros(&specs)?;
        for layer in &mut net.layers {
            let bound = 1.0 / (layer.in_dim() as f64).sqrt();
            for w in layer.weight.data_mut() {
                *w = rng::uniform(rng, -bound, bound);
            }
            for b in &mut layer.bias {
                *b = rng::uniform(rng, -bound, bound);
            }
        }
        Ok(net)
    }

    pub fn specs_for(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        layer_norm_hidden: bool,
    ) -> Result<Vec<LayerSpec>> {
        if sizes.len() < 2 {
            return Err(Error::Config("an MLP needs at least input and output sizes".into()));
        }
        let n = sizes.len() - 1;
        Ok((0..n)
            .map(|i| {
                let last = i == n - 1;
                LayerSpec {
                    in_dim: sizes[i],
                    out_dim: sizes[i + 1],
                    activation: if last { output } else { hidden },
                    layer_norm: !last && layer_norm_hidden,
                }
            })
            .collect())
    }

    pub fn zeros(specs: &[LayerSpec]) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Config("an MLP needs at least one layer".into()));
        }
        for (i, pair) in specs.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim,
                    i + 1,
                    pair[1].in_dim
                )));
            }
        }
        if specs.iter().any(|s| s.in_dim == 0 || s.out_dim == 0) {
            return Err(Error::Config("layer dimensions must be positive".into()));
        }
        Ok(Self {
            layers: specs
                .iter()
                .map(|s| Layer {
                    weight: Matrix::zeros(s.out_dim, s.in_dim),
                    bias: vec![0.0; s.out_dim],
                    activation: s.activation,
                    layer_norm: s.layer_norm,
                })
                .collect(),
        })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers
            .iter()
            .map(|l| LayerSpec {
                in_dim: l.in_dim(),
                out_dim: l.out_dim(),
                activation: l.activation,
                layer_norm: l.layer_norm,
            })
            .collect()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            out.push(l.weight.data());
            out.push(l.bias.as_slice());
        }
        out
    }

    /// Weight then bias for every layer, in layer order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &mut self.layers {
            out.push(l.weight.data_mut());
            out.push(l.bias.as_mut_slice());
        }
        out
    }

    /// Single-sample forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = Matrix::from_vec(1, input.len(), input.to_vec())?;
        Ok(self.forward_batch(&x)?.into_data())
    }

    /// Batched forward pass without recording activations.
    pub fn forward_batch(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for layer in &self.layers {
            let (_, out, _) = layer_forward(layer, &cur)?;
            cur = out;
        }
        Ok(cur)
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<ForwardCache> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut inv_std = Vec::with_capacity(self.layers.len());
        inputs.push(x.clone());
        for layer in &self.layers {
            let (z, out, is) = layer_forward(layer, inputs.last().unwrap())?;
            pre.push(z);
            inv_std.push(is);
            inputs.push(out);
        }
        Ok(ForwardCache {
            inputs,
            pre,
            inv_std,
        })
    }

    /// Gradients of `sum_rows <d_out, output>` with respect to every
    /// parameter (summed over the batch) and to the input.
    pub fn backward(&self, cache: &ForwardCache, d_out: &Matrix) -> Result<(MlpGrads, Matrix)> {
        let out = cache.output();
        if d_out.rows() != out.rows() || d_out.cols() != out.cols() {
            return Err(Error::Shape(format!(
                "output gradient is {}x{}, forward output was {}x{}",
                d_out.rows(),
                d_out.cols(),
                out.rows(),
                out.cols()
            )));
        }
        let mut grads = MlpGrads::zeros_like(self);
        let mut delta = d_out.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let z = &cache.pre[l];
            let y = &cache.inputs[l + 1];
            for ((d, &zv), &yv) in delta.data_mut().iter_mut().zip(z.data()).zip(y.data()) {
                *d *= layer.activation.derivative(zv, yv);
            }
            if let Some(inv_std) = &cache.inv_std[l] {
                layer_norm_backward(&mut delta, z, inv_std);
            }
            gemm(1.0, &delta, true, &cache.inputs[l], false, 0.0, &mut grads.weights[l])?;
            grads.biases[l] = delta.col_sums();
            let mut d_in = Matrix::zeros(delta.rows(), layer.in_dim());
            gemm(1.0, &delta, false, &layer.weight, false, 0.0, &mut d_in)?;
            delta = d_in;
        }
        Ok((grads, delta))
    }

    /// Single-sample backward pass: returns parameter and input gradients.
    pub fn backward_single(&self, input: &[f64], output_grad: &[f64]) -> Result<(MlpGrads, Vec<f64>)> {
        let x = Matrix::from_vec(1, input.len(), input.to_vec())?;
        let cache = self.forward_cached(&x)?;
        let g = Matrix::from_vec(1, output_grad.len(), output_grad.to_vec())?;
        let (grads, d_in) = self.backward(&cache, &g)?;
        Ok((grads, d_in.into_data()))
    }

    /// `self ← (1 − tau)·self + tau·src`.
    pub fn polyak_from(&mut self, src: &MlpParams, tau: f64) -> Result<()> {
        if self.specs() != src.specs() {
            return Err(Error::Shape("polyak update between different architectures".into()));
        }
        for (dst, s) in self.tensors_mut().into_iter().zip(src.tensors()) {
            for (d, v) in dst.iter_mut().zip(s) {
                *d = (1.0 - tau) * *d + tau * v;
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "network expects input dim {}, got {}",
                self.in_dim(),
                x.cols()
            )));
        }
        Ok(())
    }
}

fn layer_forward(layer: &Layer, x: &Matrix) -> Result<(Matrix, Matrix, Option<Vec<f64>>)> {
    let n = x.rows();
    let mut z = Matrix::zeros(n, layer.out_dim());
    for r in 0..n {
        z.row_mut(r).copy_from_slice(&layer.bias);
    }
    gemm(1.0, x, false, &layer.weight, true, 1.0, &mut z)?;
    let inv_std = if layer.layer_norm {
        let width = z.cols() as f64;
        let mut inv = Vec::with_capacity(n);
        for r in 0..n {
            let row = z.row_mut(r);
            let mean = row.iter().sum::<f64>() / width;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv.push(is);
        }
        Some(inv)
    } else {
        None
    };
    let mut out = z.clone();
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v = layer.activation.apply(*v));
    Ok((z, out, inv_std))
}

/// In-place: `delta` holds dL/dŷ on entry and dL/dz on exit.
fn layer_norm_backward(delta: &mut Matrix, normed: &Matrix, inv_std: &[f64]) {
    let width = delta.cols() as f64;
    for (r, &is) in inv_std.iter().enumerate() {
        let yhat = normed.row(r);
        let d = delta.row_mut(r);
        let mean_d = d.iter().sum::<f64>() / width;
        let mean_dy = d.iter().zip(yhat).map(|(a, b)| a * b).sum::<f64>() / width;
        for (dv, &yv) in d.iter_mut().zip(yhat) {
            *dv = is * (*dv - mean_d - yv * mean_dy);
        }
    }
}
