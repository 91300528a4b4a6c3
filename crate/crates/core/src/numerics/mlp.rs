//! Fully connected tanh network with an exact reverse-mode pass.
//!
//! Weights are stored row-major (`[out][in]`) per layer, followed by the
//! layer's bias, in segments named `layer{l}.weight` / `layer{l}.bias`.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::params::ParameterVector;
use super::rng::RngStream;
use crate::error::{FlowError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl fmt::Display for NetworkShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.input_dim)?;
        for h in &self.hidden_dims {
            write!(f, "-{h}")?;
        }
        write!(f, "-{}", self.output_dim)
    }
}

impl NetworkShape {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Result<Self> {
        let shape = Self {
            input_dim,
            hidden_dims,
            output_dim,
            activation: Activation::Tanh,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(FlowError::Shape(format!(
                "all layer widths must be positive, got {self}"
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for every affine layer.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn layout(&self) -> Vec<(String, usize)> {
        self.layers()
            .iter()
            .enumerate()
            .flat_map(|(l, (i, o))| {
                [
                    (format!("layer{l}.weight"), i * o),
                    (format!("layer{l}.bias"), *o),
                ]
            })
            .collect()
    }

    pub fn zero_params(&self) -> ParameterVector {
        ParameterVector::zeros(&self.layout())
    }

    /// Glorot-uniform weights in ±√(6/(fan_in+fan_out)), zero biases.
    pub fn init_params(&self, rng: &mut RngStream) -> ParameterVector {
        let mut params = self.zero_params();
        let values = params.values_mut();
        let mut offset = 0;
        for (fan_in, fan_out) in self.layers() {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in &mut values[offset..offset + fan_in * fan_out] {
                *w = limit * (2.0 * rng.uniform() - 1.0);
            }
            offset += fan_in * fan_out + fan_out;
        }
        params
    }

    fn check(&self, params: &ParameterVector, input: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(FlowError::Shape(format!(
                "network {self} needs {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        if input.len() != self.input_dim {
            return Err(FlowError::Shape(format!(
                "network {self} expects input of length {}, got {}",
                self.input_dim,
                input.len()
            )));
        }
        Ok(())
    }
}

fn affine(weights: &[f64], bias: &[f64], input: &[f64], out: &mut Vec<f64>) {
    let n_in = input.len();
    out.clear();
    out.extend(bias.iter().enumerate().map(|(o, b)| {
        let row = &weights[o * n_in..(o + 1) * n_in];
        b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>()
    }));
}

pub fn mlp_forward(params: &ParameterVector, shape: &NetworkShape, input: &[f64]) -> Result<Vec<f64>> {
    shape.check(params, input)?;
    let values = params.values();
    let layers = shape.layers();
    let last = layers.len() - 1;
    let mut h = input.to_vec();
    let mut z = Vec::new();
    let mut offset = 0;
    for (l, (n_in, n_out)) in layers.into_iter().enumerate() {
        let w = &values[offset..offset + n_in * n_out];
        let b = &values[offset + n_in * n_out..offset + n_in * n_out + n_out];
        affine(w, b, &h, &mut z);
        if l != last {
            z.iter_mut().for_each(|v| *v = v.tanh());
        }
        std::mem::swap(&mut h, &mut z);
        offset += n_in * n_out + n_out;
    }
    Ok(h)
}

/// Gradients of `<mlp_forward(params, input), cotangent>`.
pub struct MlpGradient {
    pub params: ParameterVector,
    pub input: Vec<f64>,
}

pub fn mlp_backward(
    params: &ParameterVector,
    shape: &NetworkShape,
    input: &[f64],
    cotangent: &[f64],
) -> Result<MlpGradient> {
    let mut grad = params.zeros_like();
    let input_grad = mlp_backward_accumulate(params, shape, input, cotangent, &mut grad)?;
    Ok(MlpGradient {
        params: grad,
        input: input_grad,
    })
}

/// Like [`mlp_backward`] but adds the parameter gradient into `acc`.
/// Returns the input gradient.
pub fn mlp_backward_accumulate(
    params: &ParameterVector,
    shape: &NetworkShape,
    input: &[f64],
    cotangent: &[f64],
    acc: &mut ParameterVector,
) -> Result<Vec<f64>> {
    let (_, input_grad) = mlp_backward_with(params, shape, input, acc, |_| Ok(cotangent.to_vec()))?;
    Ok(input_grad)
}

/// Runs the forward pass, asks `cotangent_of` for the output cotangent given
/// the output, then back-propagates it, adding the parameter gradient into
/// `acc`. Returns `(output, input_grad)`.
pub fn mlp_backward_with<F>(
    params: &ParameterVector,
    shape: &NetworkShape,
    input: &[f64],
    acc: &mut ParameterVector,
    cotangent_of: F,
) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: FnOnce(&[f64]) -> Result<Vec<f64>>,
{
    shape.check(params, input)?;
    if acc.len() != params.len() {
        return Err(FlowError::Shape("gradient accumulator layout differs".into()));
    }
    let values = params.values();
    let layers = shape.layers();
    let last = layers.len() - 1;

    // Forward pass keeping each layer's input activation.
    let mut offsets = Vec::with_capacity(layers.len());
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(layers.len() + 1);
    acts.push(input.to_vec());
    let mut offset = 0;
    for (l, &(n_in, n_out)) in layers.iter().enumerate() {
        offsets.push(offset);
        let w = &values[offset..offset + n_in * n_out];
        let b = &values[offset + n_in * n_out..offset + n_in * n_out + n_out];
        let mut z = Vec::with_capacity(n_out);
        affine(w, b, &acts[l], &mut z);
        if l != last {
            z.iter_mut().for_each(|v| *v = v.tanh());
        }
        acts.push(z);
        offset += n_in * n_out + n_out;
    }

    let output = acts[layers.len()].clone();
    let cotangent = cotangent_of(&output)?;
    if cotangent.len() != shape.output_dim {
        return Err(FlowError::Shape(format!(
            "cotangent length {} does not match output dim {}",
            cotangent.len(),
            shape.output_dim
        )));
    }
    let grad = acc.values_mut();
    let mut delta = cotangent;
    for l in (0..layers.len()).rev() {
        let (n_in, n_out) = layers[l];
        if l != last {
            // acts[l + 1] holds tanh(z); d tanh = 1 - tanh^2.
            for (d, a) in delta.iter_mut().zip(&acts[l + 1]) {
                *d *= 1.0 - a * a;
            }
        }
        let off = offsets[l];
        let h = &acts[l];
        for o in 0..n_out {
            let d = delta[o];
            let row = &mut grad[off + o * n_in..off + (o + 1) * n_in];
            for (g, x) in row.iter_mut().zip(h) {
                *g += d * x;
            }
            grad[off + n_in * n_out + o] += d;
        }
        let w = &values[off..off + n_in * n_out];
        let mut next = vec![0.0; n_in];
        for (o, d) in delta.iter().enumerate() {
            for (nx, wv) in next.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                *nx += d * wv;
            }
        }
        delta = next;
    }
    Ok((output, delta))
}
