use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::Rng;
use crate::error::{ensure_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

impl LayerSpec {
    fn param_count(&self) -> usize {
        self.output * self.input + self.output
    }
}

/// Fully-connected feed-forward network. Layer `l` stores a row-major
/// `output x input` weight block followed by its bias, all inside one
/// flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<LayerSpec>,
    offsets: Vec<usize>,
    params: Vec<f64>,
}

/// Per-layer outputs recorded by [`Mlp::forward_trace`]; `values[0]` is the
/// input and `values[l + 1]` the post-activation output of layer `l`.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    pub values: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.values.last().expect("trace holds at least the input")
    }
}

impl Mlp {
    /// Builds a network from layer widths, e.g. `[in, h, h, out]`, with one
    /// activation per layer. Weights and biases are drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(widths: &[usize], activations: &[Activation], rng: &mut Rng) -> Self {
        let mut net = Self::zeros(widths, activations);
        let mut offset = 0;
        for layer in &net.layers {
            let bound = 1.0 / (layer.input as f64).sqrt();
            for p in &mut net.params[offset..offset + layer.param_count()] {
                *p = rng.random_range(-bound..bound);
            }
            offset += layer.param_count();
        }
        net
    }

    pub fn zeros(widths: &[usize], activations: &[Activation]) -> Self {
        assert!(widths.len() >= 2, "an mlp needs input and output widths");
        assert_eq!(widths.len() - 1, activations.len(), "one activation per layer");
        let layers: Vec<LayerSpec> = widths
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| LayerSpec {
                input: w[0],
                output: w[1],
                activation,
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn from_layers(layers: Vec<LayerSpec>) -> Self {
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0;
        for (i, l) in layers.iter().enumerate() {
            if i > 0 {
                assert_eq!(layers[i - 1].output, l.input, "adjacent layer shapes");
            }
            offsets.push(total);
            total += l.param_count();
        }
        Self {
            layers,
            offsets,
            params: vec![0.0; total],
        }
    }

    pub fn with_params(layers: Vec<LayerSpec>, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::from_layers(layers);
        ensure_dim("mlp parameters", net.params.len(), params.len())?;
        net.params = params;
        Ok(net)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Weight block of layer `l` (row-major, `output x input`).
    pub fn weights(&self, l: usize) -> &[f64] {
        let spec = &self.layers[l];
        let o = self.offsets[l];
        &self.params[o..o + spec.output * spec.input]
    }

    pub fn weights_mut(&mut self, l: usize) -> &mut [f64] {
        let spec = self.layers[l];
        let o = self.offsets[l];
        &mut self.params[o..o + spec.output * spec.input]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        let spec = &self.layers[l];
        let o = self.offsets[l] + spec.output * spec.input;
        &self.params[o..o + spec.output]
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        let spec = self.layers[l];
        let o = self.offsets[l] + spec.output * spec.input;
        &mut self.params[o..o + spec.output]
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        ensure_dim("mlp input", self.input_dim(), input.len())?;
        Ok(self.forward_with(&self.params, input))
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<MlpTrace> {
        ensure_dim("mlp input", self.input_dim(), input.len())?;
        Ok(self.trace_with(&self.params, input))
    }

    /// Forward pass under an alternative parameter vector of the same layout.
    pub(crate) fn forward_with(&self, params: &[f64], input: &[f64]) -> Vec<f64> {
        let mut x = input.to_vec();
        for (l, spec) in self.layers.iter().enumerate() {
            x = self.layer_forward(params, l, spec, &x);
        }
        x
    }

    pub(crate) fn trace_with(&self, params: &[f64], input: &[f64]) -> MlpTrace {
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(input.to_vec());
        for (l, spec) in self.layers.iter().enumerate() {
            let y = self.layer_forward(params, l, spec, values.last().unwrap());
            values.push(y);
        }
        MlpTrace { values }
    }

    fn layer_forward(&self, params: &[f64], l: usize, spec: &LayerSpec, x: &[f64]) -> Vec<f64> {
        let o = self.offsets[l];
        let w = &params[o..o + spec.output * spec.input];
        let b = &params[o + spec.output * spec.input..o + spec.param_count()];
        w.chunks_exact(spec.input)
            .zip(b)
            .map(|(row, bias)| {
                let z: f64 = row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + bias;
                spec.activation.apply(z)
            })
            .collect()
    }

    /// Backpropagates `upstream` (dL/d output) through a recorded trace,
    /// adding parameter gradients into `grad` and returning dL/d input.
    pub fn backward_accumulate(
        &self,
        trace: &MlpTrace,
        upstream: &[f64],
        grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        self.backward_with(&self.params, trace, upstream, grad)
    }

    /// [`Mlp::backward_accumulate`] under an alternative parameter vector.
    pub(crate) fn backward_with(
        &self,
        params: &[f64],
        trace: &MlpTrace,
        upstream: &[f64],
        grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        ensure_dim("mlp upstream gradient", self.output_dim(), upstream.len())?;
        ensure_dim("mlp gradient buffer", self.params.len(), grad.len())?;
        if trace.values.len() != self.layers.len() + 1 {
            return Err(Error::Contract("trace does not match network depth".into()));
        }
        let mut delta = upstream.to_vec();
        for (l, spec) in self.layers.iter().enumerate().rev() {
            let y = &trace.values[l + 1];
            let x = &trace.values[l];
            for (d, &yi) in delta.iter_mut().zip(y) {
                *d *= spec.activation.derivative_from_output(yi);
            }
            let o = self.offsets[l];
            let nw = spec.output * spec.input;
            let (gw, gb) = grad[o..o + spec.param_count()].split_at_mut(nw);
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                gb[r] += d;
                for (g, &xi) in gw[r * spec.input..(r + 1) * spec.input].iter_mut().zip(x) {
                    *g += d * xi;
                }
            }
            let w = &params[o..o + nw];
            let mut next = vec![0.0; spec.input];
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (n, &wv) in next.iter_mut().zip(&w[r * spec.input..(r + 1) * spec.input]) {
                    *n += d * wv;
                }
            }
            delta = next;
        }
        Ok(delta)
    }

    /// Returns `(parameter gradients, input gradient)` for the scalar loss
    /// whose gradient at the output is `upstream`.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let trace = self.forward_trace(input)?;
        let mut grad = vec![0.0; self.params.len()];
        let input_grad = self.backward_accumulate(&trace, upstream, &mut grad)?;
        Ok((grad, input_grad))
    }
}
