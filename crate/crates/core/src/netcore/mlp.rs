use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kernels::tanh_fast;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// Parameters of one dense feedforward network.
///
/// All weights and biases live in a single flat buffer. The layout is
/// layer-major and, within a layer, the row-major weight matrix `W^l`
/// (shape `n_l x n_{l-1}`) comes before the bias `b^l`. Gradients and
/// optimizer moments use the same layout, so a flat view is always a valid
/// parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layer_sizes: Vec<usize>,
    data: Vec<f64>,
    activation: Activation,
}

/// Version tag of the flattening order above.
pub const FLATTEN_VERSION: u32 = 1;

pub fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes
        .windows(2)
        .map(|w| w[1] * w[0] + w[1])
        .sum()
}

fn check_layer_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::config(format!(
            "a network needs at least an input and an output layer, got layer_sizes {layer_sizes:?}"
        )));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::config(format!(
            "layer sizes must be positive, got {layer_sizes:?}"
        )));
    }
    if *layer_sizes.last().unwrap() != 1 {
        return Err(Error::config(format!(
            "networks have a scalar output, got layer_sizes {layer_sizes:?}"
        )));
    }
    Ok(())
}

impl MlpParams {
    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        check_layer_sizes(layer_sizes)?;
        Ok(MlpParams {
            layer_sizes: layer_sizes.to_vec(),
            data: vec![0.0; param_count(layer_sizes)],
            activation: Activation::Tanh,
        })
    }

    pub fn from_flat(layer_sizes: &[usize], data: Vec<f64>) -> Result<Self> {
        check_layer_sizes(layer_sizes)?;
        let expected = param_count(layer_sizes);
        if data.len() != expected {
            return Err(Error::config(format!(
                "layer sizes {layer_sizes:?} need {expected} parameters, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("parameter {i} is not finite"), None));
        }
        Ok(MlpParams {
            layer_sizes: layer_sizes.to_vec(),
            data,
            activation: Activation::Tanh,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Number of affine layers `L` (hidden layers plus the output layer).
    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    /// Offset of `W^l` in the flat buffer, for `l` in `1..=L`.
    pub fn layer_offset(&self, l: usize) -> usize {
        param_count(&self.layer_sizes[..l])
    }

    pub fn weight(&self, l: usize) -> ArrayView2<'_, f64> {
        let (rows, cols) = (self.layer_sizes[l], self.layer_sizes[l - 1]);
        let off = self.layer_offset(l);
        ArrayView2::from_shape((rows, cols), &self.data[off..off + rows * cols]).unwrap()
    }

    pub fn bias(&self, l: usize) -> ArrayView1<'_, f64> {
        let (rows, cols) = (self.layer_sizes[l], self.layer_sizes[l - 1]);
        let off = self.layer_offset(l) + rows * cols;
        ArrayView1::from(&self.data[off..off + rows])
    }

    pub fn weight_mut(&mut self, l: usize) -> ArrayViewMut2<'_, f64> {
        let (rows, cols) = (self.layer_sizes[l], self.layer_sizes[l - 1]);
        let off = self.layer_offset(l);
        ArrayViewMut2::from_shape((rows, cols), &mut self.data[off..off + rows * cols]).unwrap()
    }

    pub fn bias_mut(&mut self, l: usize) -> ArrayViewMut1<'_, f64> {
        let (rows, cols) = (self.layer_sizes[l], self.layer_sizes[l - 1]);
        let off = self.layer_offset(l) + rows * cols;
        ArrayViewMut1::from(&mut self.data[off..off + rows])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Glorot-uniform weights, zero biases. Deterministic in `seed`.
pub fn init_params(layer_sizes: &[usize], seed: u64) -> Result<MlpParams> {
    let mut params = MlpParams::zeros(layer_sizes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in 1..=params.num_layers() {
        let fan_out = layer_sizes[l];
        let fan_in = layer_sizes[l - 1];
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for w in params.weight_mut(l).iter_mut() {
            *w = rng.random_range(-limit..limit);
        }
    }
    Ok(params)
}

/// Plain forward pass: `a^l = tanh(W^l a^{l-1} + b^l)` for hidden layers and
/// an affine output layer.
pub fn forward(params: &MlpParams, features: &[f64]) -> Result<f64> {
    if features.len() != params.input_dim() {
        return Err(Error::config(format!(
            "network expects {} input features, got {}",
            params.input_dim(),
            features.len()
        )));
    }
    let num_layers = params.num_layers();
    let mut a = features.to_vec();
    for l in 1..=num_layers {
        let w = params.weight(l);
        let b = params.bias(l);
        let mut z: Vec<f64> = w
            .rows()
            .into_iter()
            .zip(b.iter())
            .map(|(row, bias)| row.iter().zip(&a).map(|(wi, ai)| wi * ai).sum::<f64>() + bias)
            .collect();
        if l < num_layers {
            z.iter_mut().for_each(|v| *v = tanh_fast(*v));
        }
        a = z;
    }
    Ok(a[0])
}
