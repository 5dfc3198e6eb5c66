//! Accuracy versus fractional bits, run through the full encrypted path.

use std::sync::Arc;

use super::server::{spawn_loopback_server, Credentials, Server, ServerConfig};
use super::{Client, ClientConfig, ProtocolError};
use crate::fixedpoint::{quantize_model, CodecConfig};
use crate::model::{forward_quantized, Dataset, MlpModel};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub frac_bits: u32,
    pub encrypted_accuracy: f64,
    /// Plaintext integer pipeline at the same `Fl`.
    pub oracle_accuracy: f64,
    /// Floating-point model.
    pub plain_accuracy: f64,
    /// Fraction of images whose encrypted label equals the float label.
    pub label_agreement: f64,
    /// Encrypted logits equal the oracle's, integer for integer, on every image.
    pub logits_match: bool,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str =
        "frac_bits,encrypted_accuracy,oracle_accuracy,plain_accuracy,label_agreement,logits_match";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.4},{:.4},{:.4},{:.4},{}",
            self.frac_bits,
            self.encrypted_accuracy,
            self.oracle_accuracy,
            self.plain_accuracy,
            self.label_agreement,
            self.logits_match
        )
    }
}

/// For each `Fl`: quantizes `model`, serves it on an in-process transport and
/// classifies every image of `test` through an encrypted session.
pub fn sweep_precision(
    model: &MlpModel,
    test: &Dataset,
    frac_bits: &[u32],
    key_bits: u64,
    int_bits: u32,
    seed: u64,
) -> Result<Vec<SweepRow>, ProtocolError> {
    if test.is_empty() {
        return Err(crate::model::ModelError::EmptyDataset.into());
    }
    let total = test.len() as f64;
    let plain: Vec<usize> = test
        .images
        .iter()
        .map(|x| model.predict(x))
        .collect::<Result<_, _>>()?;
    let plain_correct = plain.iter().zip(&test.labels).filter(|(p, l)| p == l).count();

    let mut rows = Vec::with_capacity(frac_bits.len());
    for &fl in frac_bits {
        let codec = CodecConfig::new(fl, int_bits, key_bits)?;
        let q = quantize_model(model, &codec)?;
        let oracle: Vec<_> = test
            .images
            .iter()
            .map(|x| forward_quantized(&q, x, &codec))
            .collect::<Result<_, _>>()?;

        let server = Server::new(
            q,
            Credentials::single("sweep", "sweep"),
            ServerConfig {
                min_key_bits: key_bits,
                seed: Some(seed ^ fl as u64),
                record: false,
            },
        )?;
        let (connector, handle) = spawn_loopback_server(Arc::new(server));
        let mut cfg = ClientConfig::new("sweep", "sweep");
        cfg.key_bits = key_bits;
        cfg.frac_bits = fl;
        cfg.int_bits = int_bits;
        cfg.seed = Some(seed.wrapping_add(fl as u64));
        let mut client = Client::new(cfg)?;
        let outcomes = client.classify(connector.connect()?, &test.images).map_err(|e| e.error)?;
        drop(connector);
        let _ = handle.join();

        let mut enc_correct = 0;
        let mut oracle_correct = 0;
        let mut agree = 0;
        let mut logits_match = true;
        for (i, (o, q)) in outcomes.iter().zip(&oracle).enumerate() {
            let label = o.label();
            enc_correct += usize::from(label == test.labels[i]);
            oracle_correct += usize::from(q.label() == test.labels[i]);
            agree += usize::from(label == plain[i]);
            logits_match &= o.logits.as_slice() == q.logits();
        }
        rows.push(SweepRow {
            frac_bits: fl,
            encrypted_accuracy: enc_correct as f64 / total,
            oracle_accuracy: oracle_correct as f64 / total,
            plain_accuracy: plain_correct as f64 / total,
            label_agreement: agree as f64 / total,
            logits_match,
        });
    }
    Ok(rows)
}
