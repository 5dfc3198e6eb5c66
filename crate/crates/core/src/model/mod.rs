//! Plaintext multilayer perceptron: definition, forward passes, training,
//! persistence and the synthetic two-class image set.

mod dataset;
mod io;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::fixedpoint::{self, CodecConfig, CodecError, QuantizedModel};

pub use dataset::{class_separation, orientation_statistic, synth_dataset, Dataset, Separation};
pub use io::{load_model, parse_model, save_model, write_model};
pub use train::{
    loss, parameter_gradients, train, Gradients, Optimizer, TrainConfig, TrainOutcome,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input has {got} values, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("layer {layer}: fan-in {got} does not match previous width {expected}")]
    FanInMismatch {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("layer {layer}: {msg}")]
    LayerShape { layer: usize, msg: String },
    #[error("layer {layer}: softmax must be the final activation and only there")]
    ActivationPlacement { layer: usize },
    #[error("model has no layers")]
    Empty,
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Sigmoid,
    Relu,
    Softmax,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Activation {
    pub fn apply(self, pre: &[f64]) -> Vec<f64> {
        match self {
            Activation::Sigmoid => pre.iter().map(|&v| sigmoid(v)).collect(),
            Activation::Relu => pre.iter().map(|&v| v.max(0.0)).collect(),
            Activation::Softmax => {
                let max = pre.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = pre.iter().map(|&v| (v - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                exps.into_iter().map(|e| e / sum).collect()
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
            Activation::Softmax => "softmax",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sigmoid" => Ok(Activation::Sigmoid),
            "relu" => Ok(Activation::Relu),
            "softmax" => Ok(Activation::Softmax),
            other => Err(format!("unknown activation `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Row-major, `fan_out × fan_in`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn zeros(fan_in: usize, fan_out: usize, activation: Activation) -> Self {
        Layer {
            fan_in,
            fan_out,
            weights: vec![0.0; fan_in * fan_out],
            bias: vec![0.0; fan_out],
            activation,
        }
    }

    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn xavier<R: Rng + ?Sized>(
        fan_in: usize,
        fan_out: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weights = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-limit..=limit))
            .collect();
        Layer {
            fan_in,
            fan_out,
            weights,
            bias: vec![0.0; fan_out],
            activation,
        }
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.weights[j * self.fan_in..(j + 1) * self.fan_in]
    }

    pub fn pre_activation(&self, x: &[f64]) -> Vec<f64> {
        (0..self.fan_out)
            .map(|j| {
                self.row(j)
                    .iter()
                    .zip(x)
                    .map(|(w, v)| w * v)
                    .sum::<f64>()
                    + self.bias[j]
            })
            .collect()
    }
}

/// Layer widths plus hidden activations, e.g. `1024-128-32-2` with
/// `sigmoid,relu`. The output layer is always softmax.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub sizes: Vec<usize>,
    pub hidden: Vec<Activation>,
}

impl Architecture {
    pub fn new(sizes: Vec<usize>, hidden: Vec<Activation>) -> Result<Self, ModelError> {
        if sizes.len() < 2 {
            return Err(ModelError::Empty);
        }
        if hidden.len() != sizes.len() - 2 {
            return Err(ModelError::Config(format!(
                "{} hidden layers need {} activations, got {}",
                sizes.len() - 2,
                sizes.len() - 2,
                hidden.len()
            )));
        }
        if let Some(pos) = hidden.iter().position(|a| *a == Activation::Softmax) {
            return Err(ModelError::ActivationPlacement { layer: pos });
        }
        if sizes.contains(&0) {
            return Err(ModelError::Config("layer widths must be positive".into()));
        }
        Ok(Architecture { sizes, hidden })
    }

    /// `1024 → 128 (sigmoid) → 32 (relu) → 2 (softmax)`.
    pub fn default_diagnosis() -> Self {
        Architecture {
            sizes: vec![1024, 128, 32, 2],
            hidden: vec![Activation::Sigmoid, Activation::Relu],
        }
    }

    /// Parses `"1024-128-32-2"` and `"sigmoid,relu"`.
    pub fn parse(sizes: &str, hidden: &str) -> Result<Self, ModelError> {
        let sizes = parse_sizes(sizes)?;
        let hidden = if hidden.trim().is_empty() {
            Vec::new()
        } else {
            hidden
                .split(',')
                .map(|s| s.parse::<Activation>().map_err(ModelError::Config))
                .collect::<Result<Vec<_>, _>>()?
        };
        Architecture::new(sizes, hidden)
    }

    pub fn activation(&self, layer: usize) -> Activation {
        self.hidden.get(layer).copied().unwrap_or(Activation::Softmax)
    }
}

pub fn parse_sizes(s: &str) -> Result<Vec<usize>, ModelError> {
    s.split(['-', ','])
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|e| ModelError::Config(format!("bad layer size `{t}`: {e}")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub input_dim: usize,
    pub layers: Vec<Layer>,
}

impl MlpModel {
    pub fn new(input_dim: usize, layers: Vec<Layer>) -> Result<Self, ModelError> {
        let model = MlpModel { input_dim, layers };
        model.validate()?;
        Ok(model)
    }

    pub fn init<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Self {
        let layers = arch
            .sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Layer::xavier(w[0], w[1], arch.activation(i), rng))
            .collect();
        MlpModel {
            input_dim: arch.sizes[0],
            layers,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers.is_empty() {
            return Err(ModelError::Empty);
        }
        let mut width = self.input_dim;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.fan_in != width {
                return Err(ModelError::FanInMismatch {
                    layer: i,
                    expected: width,
                    got: layer.fan_in,
                });
            }
            if layer.weights.len() != layer.fan_in * layer.fan_out || layer.bias.len() != layer.fan_out
            {
                return Err(ModelError::LayerShape {
                    layer: i,
                    msg: "parameter count does not match dimensions".into(),
                });
            }
            if (layer.activation == Activation::Softmax) != (i == last) {
                return Err(ModelError::ActivationPlacement { layer: i });
            }
            width = layer.fan_out;
        }
        Ok(())
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim)
            .chain(self.layers.iter().map(|l| l.fan_out))
            .collect()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    /// Full-precision forward pass returning class probabilities.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        if x.len() != self.input_dim {
            return Err(ModelError::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        let mut act = x.to_vec();
        for layer in &self.layers {
            act = layer.activation.apply(&layer.pre_activation(&act));
        }
        Ok(act)
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize, ModelError> {
        Ok(argmax(&self.forward(x)?))
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }
}

/// First index of the maximum; ties resolve to the lower class.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Result of the integer pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedForward {
    pub probabilities: Vec<f64>,
    /// Integer pre-activations per layer at scale `2^(2·Fl)`.
    pub trace: Vec<Vec<i128>>,
}

impl QuantizedForward {
    pub fn logits(&self) -> &[i128] {
        self.trace.last().map_or(&[], |v| v.as_slice())
    }

    pub fn label(&self) -> usize {
        argmax(&self.probabilities)
    }
}

/// Integer-exact simulation of the encrypted pipeline: inputs encoded at
/// `Fl`, integer weighted sums at `2·Fl`, client-side activation and
/// re-encoding at `Fl`, softmax on decoded logits.
pub fn forward_quantized(
    model: &QuantizedModel,
    x: &[f64],
    cfg: &CodecConfig,
) -> Result<QuantizedForward, ModelError> {
    if x.len() != model.input_dim {
        return Err(ModelError::DimensionMismatch {
            expected: model.input_dim,
            got: x.len(),
        });
    }
    if cfg.frac_bits != model.frac_bits {
        return Err(ModelError::Config(format!(
            "codec uses {} fractional bits, model was quantized at {}",
            cfg.frac_bits, model.frac_bits
        )));
    }
    model.check_modulus(cfg.modulus_bits)?;
    let mut act: Vec<i64> = x
        .iter()
        .map(|&v| fixedpoint::encode_int(v, cfg))
        .collect::<Result<_, _>>()?;
    let mut trace = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let pre: Vec<i128> = (0..layer.fan_out)
            .map(|j| {
                layer
                    .row(j)
                    .iter()
                    .zip(&act)
                    .map(|(&w, &v)| w as i128 * v as i128)
                    .sum::<i128>()
                    + layer.bias[j]
            })
            .collect();
        if layer.activation != Activation::Softmax {
            act = fixedpoint::activate_requantize(&pre, layer.activation, cfg.frac_bits, cfg.int_bits)?;
        }
        trace.push(pre);
    }
    let probabilities = fixedpoint::logits_to_probabilities(trace.last().expect("non-empty model"), cfg.frac_bits);
    Ok(QuantizedForward {
        probabilities,
        trace,
    })
}
