//! Mini-batch training with softmax cross-entropy, Adam and RMSProp.

use std::fmt;
use std::str::FromStr;

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::{sigmoid, Activation, Architecture, Dataset, MlpModel, ModelError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Adam,
    RmsProp,
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Adam => "adam",
            Optimizer::RmsProp => "rmsprop",
        })
    }
}

impl FromStr for Optimizer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(Optimizer::Adam),
            "rmsprop" => Ok(Optimizer::RmsProp),
            other => Err(format!("unknown optimizer `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub const ADAM_BETA1: f64 = 0.9;
    pub const ADAM_BETA2: f64 = 0.999;
    pub const RMSPROP_RHO: f64 = 0.9;
    pub const EPSILON: f64 = 1e-8;

    pub fn new(optimizer: Optimizer) -> Self {
        TrainConfig {
            optimizer,
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 50,
            seed: 1,
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(ModelError::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(ModelError::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Gradients laid out like the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros(model: &MlpModel) -> Self {
        Gradients {
            weights: model.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: model.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    fn scale(&mut self, s: f64) {
        for v in self.weights.iter_mut().chain(self.bias.iter_mut()) {
            v.iter_mut().for_each(|g| *g *= s);
        }
    }
}

fn cross_entropy(probs: &[f64], label: usize) -> f64 {
    let p = probs[label];
    if p.is_nan() {
        return f64::NAN;
    }
    -p.max(1e-300).ln()
}

/// Mean cross-entropy over a set of samples.
pub fn loss(model: &MlpModel, images: &[Vec<f64>], labels: &[usize]) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for (x, &y) in images.iter().zip(labels) {
        total += cross_entropy(&model.forward(x)?, y);
    }
    Ok(total / images.len().max(1) as f64)
}

/// Accumulates per-sample gradients of the cross-entropy loss into `grads`
/// and returns the sample loss.
fn backprop(model: &MlpModel, x: &[f64], label: usize, grads: &mut Gradients) -> f64 {
    let mut activations = vec![x.to_vec()];
    let mut pre_acts = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let z = layer.pre_activation(activations.last().expect("input present"));
        activations.push(layer.activation.apply(&z));
        pre_acts.push(z);
    }
    let probs = activations.last().expect("output present");
    let sample_loss = cross_entropy(probs, label);

    // softmax + cross-entropy: dL/dz = p - onehot
    let mut delta: Vec<f64> = probs.clone();
    delta[label] -= 1.0;

    for l in (0..model.layers.len()).rev() {
        let layer = &model.layers[l];
        let input = &activations[l];
        let gw = &mut grads.weights[l];
        for j in 0..layer.fan_out {
            let d = delta[j];
            grads.bias[l][j] += d;
            if d != 0.0 {
                let row = &mut gw[j * layer.fan_in..(j + 1) * layer.fan_in];
                for (g, &a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
            }
        }
        if l == 0 {
            break;
        }
        let prev = &model.layers[l - 1];
        let mut next = vec![0.0; layer.fan_in];
        for j in 0..layer.fan_out {
            let d = delta[j];
            if d == 0.0 {
                continue;
            }
            for (n, &w) in next.iter_mut().zip(layer.row(j)) {
                *n += w * d;
            }
        }
        let z_prev = &pre_acts[l - 1];
        for (i, n) in next.iter_mut().enumerate() {
            *n *= match prev.activation {
                Activation::Sigmoid => {
                    let s = sigmoid(z_prev[i]);
                    s * (1.0 - s)
                }
                Activation::Relu => {
                    if z_prev[i] > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                Activation::Softmax => unreachable!("softmax only on the output layer"),
            };
        }
        delta = next;
    }
    sample_loss
}

/// Mean gradients of the cross-entropy loss over the given samples.
pub fn parameter_gradients(
    model: &MlpModel,
    images: &[Vec<f64>],
    labels: &[usize],
) -> Result<Gradients, ModelError> {
    let mut grads = Gradients::zeros(model);
    for (x, &y) in images.iter().zip(labels) {
        if x.len() != model.input_dim {
            return Err(ModelError::DimensionMismatch {
                expected: model.input_dim,
                got: x.len(),
            });
        }
        backprop(model, x, y, &mut grads);
    }
    grads.scale(1.0 / images.len().max(1) as f64);
    Ok(grads)
}

struct OptimizerState {
    kind: Optimizer,
    first: Gradients,
    second: Gradients,
    step: i32,
}

impl OptimizerState {
    fn new(kind: Optimizer, model: &MlpModel) -> Self {
        OptimizerState {
            kind,
            first: Gradients::zeros(model),
            second: Gradients::zeros(model),
            step: 0,
        }
    }

    fn apply(&mut self, model: &mut MlpModel, grads: &Gradients, lr: f64) {
        self.step += 1;
        let eps = TrainConfig::EPSILON;
        let (b1, b2, rho) = (TrainConfig::ADAM_BETA1, TrainConfig::ADAM_BETA2, TrainConfig::RMSPROP_RHO);
        let bias1 = 1.0 - b1.powi(self.step);
        let bias2 = 1.0 - b2.powi(self.step);
        for (l, layer) in model.layers.iter_mut().enumerate() {
            let params = [
                (&mut layer.weights, &grads.weights[l], &mut self.first.weights[l], &mut self.second.weights[l]),
                (&mut layer.bias, &grads.bias[l], &mut self.first.bias[l], &mut self.second.bias[l]),
            ];
            for (theta, g, m, v) in params {
                for k in 0..theta.len() {
                    let gk = g[k];
                    match self.kind {
                        Optimizer::Adam => {
                            m[k] = b1 * m[k] + (1.0 - b1) * gk;
                            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                            let m_hat = m[k] / bias1;
                            let v_hat = v[k] / bias2;
                            theta[k] -= lr * m_hat / (v_hat.sqrt() + eps);
                        }
                        Optimizer::RmsProp => {
                            v[k] = rho * v[k] + (1.0 - rho) * gk * gk;
                            theta[k] -= lr * gk / (v[k].sqrt() + eps);
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    /// Mean training loss per epoch; entry 0 is the loss before any update.
    pub epoch_losses: Vec<f64>,
}

/// Trains a freshly initialised model (Xavier init from `cfg.seed`).
/// Deterministic for a given seed.
pub fn train(dataset: &Dataset, arch: &Architecture, cfg: &TrainConfig) -> Result<TrainOutcome, ModelError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    if dataset.dim() != arch.sizes[0] {
        return Err(ModelError::DimensionMismatch {
            expected: arch.sizes[0],
            got: dataset.dim(),
        });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut model = MlpModel::init(arch, &mut rng);
    let mut state = OptimizerState::new(cfg.optimizer, &model);
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    let initial = loss(&model, &dataset.images, &dataset.labels)?;
    let mut epoch_losses = vec![initial];
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut running = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::zeros(&model);
            for &i in batch {
                running += backprop(&model, &dataset.images[i], dataset.labels[i], &mut grads);
            }
            grads.scale(1.0 / batch.len() as f64);
            state.apply(&mut model, &grads, cfg.learning_rate);
        }
        let mean = running / dataset.len() as f64;
        if !mean.is_finite() {
            return Err(ModelError::Diverged { epoch, loss: mean });
        }
        debug!("epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }
    Ok(TrainOutcome { model, epoch_losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::synth_dataset;
    use rand::Rng;

    fn small_model(hidden: Activation, seed: u64) -> MlpModel {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let arch = Architecture::new(vec![6, 4, 2], vec![hidden]).unwrap();
        let mut m = MlpModel::init(&arch, &mut rng);
        for l in &mut m.layers {
            for b in &mut l.bias {
                *b = rng.gen_range(-0.3..0.3);
            }
        }
        m
    }

    fn finite_difference_check(model: &MlpModel, xs: &[Vec<f64>], ys: &[usize]) -> f64 {
        let analytic = parameter_gradients(model, xs, ys).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for l in 0..model.layers.len() {
            for (which, count) in [(0, model.layers[l].weights.len()), (1, model.layers[l].bias.len())] {
                for k in 0..count {
                    let mut plus = model.clone();
                    let mut minus = model.clone();
                    let (p, m, a) = if which == 0 {
                        (&mut plus.layers[l].weights[k], &mut minus.layers[l].weights[k], analytic.weights[l][k])
                    } else {
                        (&mut plus.layers[l].bias[k], &mut minus.layers[l].bias[k], analytic.bias[l][k])
                    };
                    *p += h;
                    *m -= h;
                    let numeric = (loss(&plus, xs, ys).unwrap() - loss(&minus, xs, ys).unwrap()) / (2.0 * h);
                    let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-7);
                    worst = worst.max(rel);
                }
            }
        }
        worst
    }

    fn samples(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let xs = (0..5).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let ys = (0..5).map(|i| i % 2).collect();
        (xs, ys)
    }

    #[test]
    fn gradients_match_finite_differences_sigmoid() {
        let (xs, ys) = samples(7);
        let worst = finite_difference_check(&small_model(Activation::Sigmoid, 8), &xs, &ys);
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn gradients_match_finite_differences_relu() {
        let (xs, ys) = samples(9);
        let model = small_model(Activation::Relu, 10);
        // stay away from the ReLU kink
        for x in &xs {
            assert!(model.layers[0].pre_activation(x).iter().all(|z| z.abs() > 1e-3));
        }
        let worst = finite_difference_check(&model, &xs, &ys);
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }

    fn tiny_dataset() -> Dataset {
        synth_dataset(3, 8, 2, 8)
    }

    #[test]
    fn zero_learning_rate_keeps_initialisation() {
        let ds = tiny_dataset();
        let arch = Architecture::new(vec![64, 8, 2], vec![Activation::Sigmoid]).unwrap();
        let mut cfg = TrainConfig::new(Optimizer::Adam);
        cfg.learning_rate = 0.0;
        cfg.epochs = 3;
        let trained = train(&ds, &arch, &cfg).unwrap().model;
        let init = MlpModel::init(&arch, &mut ChaCha20Rng::seed_from_u64(cfg.seed));
        assert_eq!(trained, init);
        cfg.epochs = 0;
        cfg.learning_rate = 1e-3;
        assert_eq!(train(&ds, &arch, &cfg).unwrap().model, init);
    }

    #[test]
    fn same_seed_same_model() {
        let ds = tiny_dataset();
        let arch = Architecture::new(vec![64, 8, 2], vec![Activation::Relu]).unwrap();
        let mut cfg = TrainConfig::new(Optimizer::RmsProp);
        cfg.epochs = 5;
        let a = train(&ds, &arch, &cfg).unwrap();
        let b = train(&ds, &arch, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.epoch_losses, b.epoch_losses);
    }

    #[test]
    fn loss_decreases() {
        let ds = tiny_dataset();
        let arch = Architecture::new(vec![64, 8, 2], vec![Activation::Sigmoid]).unwrap();
        for opt in [Optimizer::Adam, Optimizer::RmsProp] {
            let mut cfg = TrainConfig::new(opt);
            cfg.epochs = 30;
            cfg.learning_rate = 1e-2;
            let out = train(&ds, &arch, &cfg).unwrap();
            assert!(out.epoch_losses.last().unwrap() < &out.epoch_losses[0], "{opt}");
        }
    }

    #[test]
    fn divergence_reported() {
        let ds = tiny_dataset();
        let arch = Architecture::new(vec![64, 8, 2], vec![Activation::Relu]).unwrap();
        let mut cfg = TrainConfig::new(Optimizer::RmsProp);
        cfg.learning_rate = 1e300;
        cfg.epochs = 5;
        assert!(matches!(train(&ds, &arch, &cfg), Err(ModelError::Diverged { .. })));
    }

    #[test]
    fn bad_configs_rejected() {
        let ds = tiny_dataset();
        let arch = Architecture::new(vec![64, 2], vec![]).unwrap();
        let mut cfg = TrainConfig::new(Optimizer::Adam);
        cfg.batch_size = 0;
        assert!(matches!(train(&ds, &arch, &cfg), Err(ModelError::Config(_))));
        cfg.batch_size = 4;
        cfg.learning_rate = -1.0;
        assert!(matches!(train(&ds, &arch, &cfg), Err(ModelError::Config(_))));
        let wrong = Architecture::new(vec![10, 2], vec![]).unwrap();
        cfg.learning_rate = 1e-3;
        assert!(matches!(train(&ds, &wrong, &cfg), Err(ModelError::DimensionMismatch { .. })));
        let empty = Dataset::new(8, vec![], vec![], vec![]).unwrap();
        assert!(matches!(train(&empty, &arch, &cfg), Err(ModelError::EmptyDataset)));
    }
}
