//! Fixed-point encoding of reals into the Paillier message space.
//!
//! Inputs and activations live at scale `2^Fl`, weights at `2^Fl`, biases at
//! `2^(2·Fl)`, so every pre-activation sum comes out at `2^(2·Fl)`. The client
//! re-encodes activation outputs at `2^Fl`, which resets the scale each layer.

use num_bigint::{BigInt, BigUint};
use num_traits::ToPrimitive;
use thiserror::Error;

use crate::model::{Activation, MlpModel};
use crate::paillier::{from_residue, to_residue};

pub const DEFAULT_FRAC_BITS: u32 = 7;
pub const DEFAULT_INT_BITS: u32 = 8;
pub const MAX_FRAC_BITS: u32 = 32;
pub const MAX_INT_BITS: u32 = 24;

/// Pre-activation sums are carried in `i128` on the plaintext side.
const I128_BUDGET_BITS: u64 = 127;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("frac_bits must be in 1..={MAX_FRAC_BITS}, got {0}")]
    FracBits(u32),
    #[error("int_bits must be in 1..={MAX_INT_BITS}, got {0}")]
    IntBits(u32),
    #[error("value {value} exceeds the integer budget of {int_bits} bits")]
    Overflow { value: f64, int_bits: u32 },
    #[error("value is not finite")]
    NotFinite,
    #[error(
        "layer {layer}: fan-in {fan_in} needs a {required}-bit modulus, have {modulus_bits}"
    )]
    ModulusTooSmall {
        layer: usize,
        fan_in: usize,
        required: u64,
        modulus_bits: u64,
    },
    #[error("layer {layer}: parameter {value} exceeds the integer budget of {int_bits} bits")]
    ParameterOverflow { layer: usize, value: f64, int_bits: u32 },
    #[error("pre-activation {0} outside the representable range")]
    PreActivationRange(String),
    #[error("activation output {value} exceeds the integer budget of {int_bits} bits")]
    ActivationOverflow { value: f64, int_bits: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CodecConfig {
    pub frac_bits: u32,
    pub int_bits: u32,
    pub modulus_bits: u64,
}

impl CodecConfig {
    pub fn new(frac_bits: u32, int_bits: u32, modulus_bits: u64) -> Result<Self, CodecError> {
        if !(1..=MAX_FRAC_BITS).contains(&frac_bits) {
            return Err(CodecError::FracBits(frac_bits));
        }
        if !(1..=MAX_INT_BITS).contains(&int_bits) {
            return Err(CodecError::IntBits(int_bits));
        }
        Ok(CodecConfig {
            frac_bits,
            int_bits,
            modulus_bits,
        })
    }

    /// Modulus width needed so that a neuron with `fan_in` synapses plus a
    /// bias never wraps: `2·(Fl + Bl) + ceil(log2(fan_in + 1)) + 1` must be
    /// strictly below the modulus width.
    pub fn required_bits(&self, fan_in: usize) -> u64 {
        let terms = fan_in as u64 + 1;
        let log_terms = 64 - (terms - 1).leading_zeros() as u64;
        2 * (self.frac_bits as u64 + self.int_bits as u64) + log_terms + 1
    }

    pub fn check_fan_in(&self, layer: usize, fan_in: usize) -> Result<(), CodecError> {
        let required = self.required_bits(fan_in);
        // The plaintext oracle accumulates in i128.
        let limit = self.modulus_bits.min(I128_BUDGET_BITS + 1);
        if required < limit {
            Ok(())
        } else {
            Err(CodecError::ModulusTooSmall {
                layer,
                fan_in,
                required,
                modulus_bits: self.modulus_bits,
            })
        }
    }

    /// Smallest modulus width accepted for a model with the given largest
    /// fan-in.
    pub fn min_modulus_bits(&self, max_fan_in: usize) -> u64 {
        self.required_bits(max_fan_in) + 1
    }

    pub fn with_modulus_bits(self, modulus_bits: u64) -> Self {
        CodecConfig {
            modulus_bits,
            ..self
        }
    }
}

/// A fixed-point value embedded in `[0, n)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaledInt {
    pub raw: BigUint,
    pub scale_bits: u32,
}

/// `round(x · 2^scale)`, half away from zero.
pub fn quantize(x: f64, scale_bits: u32) -> f64 {
    (x * (2f64).powi(scale_bits as i32)).round()
}

pub fn dequantize(v: i128, scale_bits: u32) -> f64 {
    v as f64 / (2f64).powi(scale_bits as i32)
}

fn check_budget(x: f64, int_bits: u32) -> Result<(), CodecError> {
    if !x.is_finite() {
        return Err(CodecError::NotFinite);
    }
    if x.abs() >= (2f64).powi(int_bits as i32) {
        return Err(CodecError::Overflow { value: x, int_bits });
    }
    Ok(())
}

/// Integer at scale `Fl` for an in-budget real.
pub fn encode_int(x: f64, cfg: &CodecConfig) -> Result<i64, CodecError> {
    check_budget(x, cfg.int_bits)?;
    Ok(quantize(x, cfg.frac_bits) as i64)
}

pub fn encode(x: f64, cfg: &CodecConfig, n: &BigUint) -> Result<ScaledInt, CodecError> {
    let v = encode_int(x, cfg)?;
    Ok(ScaledInt {
        raw: to_residue(&BigInt::from(v), n),
        scale_bits: cfg.frac_bits,
    })
}

pub fn decode(s: &ScaledInt, n: &BigUint) -> f64 {
    let signed = from_residue(&s.raw, n);
    signed.to_f64().unwrap_or(f64::NAN) / (2f64).powi(s.scale_bits as i32)
}

/// Model parameters as integers: weights at `2^Fl`, biases at `2^(2·Fl)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Row-major, `fan_out × fan_in`.
    pub weights: Vec<i64>,
    pub bias: Vec<i128>,
    pub activation: Activation,
}

impl QuantizedLayer {
    pub fn row(&self, j: usize) -> &[i64] {
        &self.weights[j * self.fan_in..(j + 1) * self.fan_in]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub input_dim: usize,
    pub frac_bits: u32,
    pub int_bits: u32,
    pub layers: Vec<QuantizedLayer>,
}

impl QuantizedModel {
    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim)
            .chain(self.layers.iter().map(|l| l.fan_out))
            .collect()
    }

    pub fn max_fan_in(&self) -> usize {
        self.layers.iter().map(|l| l.fan_in).max().unwrap_or(0)
    }

    /// Overflow check against a concrete modulus width.
    pub fn check_modulus(&self, modulus_bits: u64) -> Result<(), CodecError> {
        let cfg = CodecConfig::new(self.frac_bits, self.int_bits, modulus_bits)?;
        for (i, layer) in self.layers.iter().enumerate() {
            cfg.check_fan_in(i, layer.fan_in)?;
        }
        Ok(())
    }

    pub fn codec(&self, modulus_bits: u64) -> CodecConfig {
        CodecConfig {
            frac_bits: self.frac_bits,
            int_bits: self.int_bits,
            modulus_bits,
        }
    }
}

pub fn quantize_model(model: &MlpModel, cfg: &CodecConfig) -> Result<QuantizedModel, CodecError> {
    let mut layers = Vec::with_capacity(model.layers.len());
    for (idx, layer) in model.layers.iter().enumerate() {
        cfg.check_fan_in(idx, layer.fan_in)?;
        let param_check = |v: f64| {
            check_budget(v, cfg.int_bits).map_err(|_| CodecError::ParameterOverflow {
                layer: idx,
                value: v,
                int_bits: cfg.int_bits,
            })
        };
        let mut weights = Vec::with_capacity(layer.weights.len());
        for &w in &layer.weights {
            param_check(w)?;
            weights.push(quantize(w, cfg.frac_bits) as i64);
        }
        let mut bias = Vec::with_capacity(layer.bias.len());
        for &b in &layer.bias {
            param_check(b)?;
            bias.push(quantize(b, 2 * cfg.frac_bits) as i128);
        }
        layers.push(QuantizedLayer {
            fan_in: layer.fan_in,
            fan_out: layer.fan_out,
            weights,
            bias,
            activation: layer.activation,
        });
    }
    Ok(QuantizedModel {
        input_dim: model.input_dim,
        frac_bits: cfg.frac_bits,
        int_bits: cfg.int_bits,
        layers,
    })
}

/// Client-side activation step: pre-activations at `2^(2·Fl)` in, activation
/// outputs at `2^Fl` out. Shared verbatim by the plaintext oracle and the
/// protocol client so both paths agree integer-for-integer.
pub fn activate_requantize(
    pre: &[i128],
    activation: Activation,
    frac_bits: u32,
    int_bits: u32,
) -> Result<Vec<i64>, CodecError> {
    let reals: Vec<f64> = pre.iter().map(|&v| dequantize(v, 2 * frac_bits)).collect();
    let outputs = activation.apply(&reals);
    outputs
        .into_iter()
        .map(|z| {
            if !z.is_finite() || z.abs() >= (2f64).powi(int_bits as i32) {
                return Err(CodecError::ActivationOverflow { value: z, int_bits });
            }
            Ok(quantize(z, frac_bits) as i64)
        })
        .collect()
}

/// Final-layer step: integer logits at `2^(2·Fl)` to class probabilities.
pub fn logits_to_probabilities(logits: &[i128], frac_bits: u32) -> Vec<f64> {
    let reals: Vec<f64> = logits.iter().map(|&v| dequantize(v, 2 * frac_bits)).collect();
    Activation::Softmax.apply(&reals)
}

/// Signed `BigInt` to `i128`, failing if it does not fit.
pub fn bigint_to_i128(v: &BigInt) -> Result<i128, CodecError> {
    v.to_i128()
        .ok_or_else(|| CodecError::PreActivationRange(v.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Layer, MlpModel};
    use proptest::prelude::*;

    fn cfg(fl: u32) -> CodecConfig {
        CodecConfig::new(fl, DEFAULT_INT_BITS, 256).unwrap()
    }

    fn n() -> BigUint {
        // any odd modulus large enough for the tests
        (BigUint::from(1u32) << 255u32) + 1u32
    }

    #[test]
    fn encode_examples() {
        let n = n();
        assert_eq!(encode(0.5, &cfg(7), &n).unwrap().raw, BigUint::from(64u32));
        assert_eq!(encode(-1.0, &cfg(7), &n).unwrap().raw, &n - 128u32);
        assert_eq!(encode(0.3, &cfg(7), &n).unwrap().raw, BigUint::from(38u32));
        assert_eq!(encode(0.5, &cfg(7), &n).unwrap().scale_bits, 7);
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(quantize(0.5 / 128.0, 7), 1.0);
        assert_eq!(quantize(-0.5 / 128.0, 7), -1.0);
        assert_eq!(quantize(1.5 / 128.0, 7), 2.0);
    }

    #[test]
    fn decode_examples() {
        let n = n();
        let half = ScaledInt { raw: 64u32.into(), scale_bits: 7 };
        assert_eq!(decode(&half, &n), 0.5);
        let neg = ScaledInt { raw: &n - 128u32, scale_bits: 7 };
        assert_eq!(decode(&neg, &n), -1.0);
    }

    #[test]
    fn overflow_rejected() {
        let n = n();
        assert!(matches!(encode(256.0, &cfg(7), &n), Err(CodecError::Overflow { .. })));
        assert!(matches!(encode(-256.0, &cfg(7), &n), Err(CodecError::Overflow { .. })));
        assert!(encode(255.99, &cfg(7), &n).is_ok());
        assert_eq!(encode(f64::NAN, &cfg(7), &n), Err(CodecError::NotFinite));
    }

    #[test]
    fn config_bounds() {
        assert_eq!(CodecConfig::new(0, 8, 256), Err(CodecError::FracBits(0)));
        assert_eq!(CodecConfig::new(33, 8, 256), Err(CodecError::FracBits(33)));
        assert_eq!(CodecConfig::new(7, 0, 256), Err(CodecError::IntBits(0)));
        // 2·15 + ceil(log2(1025)) + 1 = 42
        assert_eq!(cfg(7).required_bits(1024), 42);
        assert!(cfg(7).with_modulus_bits(43).check_fan_in(0, 1024).is_ok());
        assert!(cfg(7).with_modulus_bits(42).check_fan_in(0, 1024).is_err());
    }

    #[test]
    fn quantize_model_examples() {
        let zero = MlpModel::new(
            2,
            vec![Layer::zeros(2, 2, Activation::Softmax)],
        )
        .unwrap();
        let q = quantize_model(&zero, &cfg(7)).unwrap();
        assert!(q.layers[0].weights.iter().all(|&w| w == 0));
        assert!(q.layers[0].bias.iter().all(|&b| b == 0));

        let mut m = zero.clone();
        m.layers[0].weights[0] = 0.25;
        m.layers[0].bias[0] = 0.25;
        let q = quantize_model(&m, &cfg(7)).unwrap();
        assert_eq!(q.layers[0].weights[0], 32);
        assert_eq!(q.layers[0].bias[0], 4096);
        assert_eq!(q.layers[0].activation, Activation::Softmax);

        m.layers[0].weights[1] = 300.0;
        assert!(matches!(
            quantize_model(&m, &cfg(7)),
            Err(CodecError::ParameterOverflow { layer: 0, .. })
        ));
    }

    #[test]
    fn undersized_modulus_names_layer() {
        let m = MlpModel::new(
            64,
            vec![
                Layer::zeros(64, 4, Activation::Sigmoid),
                Layer::zeros(4, 2, Activation::Softmax),
            ],
        )
        .unwrap();
        let small = cfg(7).with_modulus_bits(38);
        assert!(matches!(
            quantize_model(&m, &small),
            Err(CodecError::ModulusTooSmall { layer: 0, fan_in: 64, .. })
        ));
    }

    #[test]
    fn requantize_sigmoid_at_zero() {
        let out = activate_requantize(&[0, 0], Activation::Sigmoid, 7, 8).unwrap();
        assert_eq!(out, vec![64, 64]);
        let relu = activate_requantize(&[-5 << 14, 3 << 14], Activation::Relu, 7, 8).unwrap();
        assert_eq!(relu, vec![0, 3 << 7]);
        assert!(activate_requantize(&[300 << 14], Activation::Relu, 7, 8).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_error_bounded(x in -255.9f64..255.9, fl in 1u32..=32) {
            let n = n();
            let c = CodecConfig::new(fl, 8, 256).unwrap();
            let back = decode(&encode(x, &c, &n).unwrap(), &n);
            prop_assert!((back - x).abs() <= (2f64).powi(-(fl as i32 + 1)) + 1e-12);
        }

        #[test]
        fn scale_algebra(x in -4.0f64..4.0, w in -4.0f64..4.0, fl in 1u32..=16) {
            // product of two Fl-scaled integers lives at 2·Fl
            let xi = quantize(x, fl) as i128;
            let wi = quantize(w, fl) as i128;
            let prod = dequantize(xi * wi, 2 * fl);
            let expect = dequantize(xi, fl) * dequantize(wi, fl);
            prop_assert!((prod - expect).abs() <= 1e-12 * expect.abs().max(1.0));
        }
    }
}
