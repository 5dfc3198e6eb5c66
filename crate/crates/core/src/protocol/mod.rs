//! Two-party keyless inference.
//!
//! The client owns every key. Per image it sends `n²`, `⟦1⟧` and the
//! encrypted pixels; the server evaluates each linear layer homomorphically,
//! sends the shuffled pre-activations back for the client to activate and
//! re-encrypt, and finally returns the encrypted logits.
//!
//! ```text
//! client                               server
//!   hello(uid, pwd)            ->
//!                              <-      hello_ok | hello_fail
//!   session_data(n², ⟦1⟧, ⟦x⟧) ->
//!                              <-      act_query(σ, shuffled ⟦y⟧)     (per hidden layer)
//!   act_reply(⟦σ(y)⟧)          ->
//!                              <-      result(⟦logits⟧)
//!   session_data ... | close   ->
//! ```

pub mod client;
pub mod server;
pub mod shuffle;
pub mod sweep;
pub mod transport;
pub mod wire;

#[cfg(test)]
mod session_tests;

use std::io::Write as _;

use num_bigint::BigUint;
use num_traits::One;
use thiserror::Error;

use crate::fixedpoint::{CodecError, QuantizedLayer};
use crate::metrics::CostCounters;
use crate::model::ModelError;
use crate::paillier::arith::{mod_inverse, mod_pow};
use crate::paillier::{Ciphertext, EvaluationKey, Keypair, PaillierError};

pub use client::{decide, Client, ClientConfig, ClientSession, Diagnosis, DiagnosisError, ImageOutcome, Ordering};
pub use server::{spawn_loopback_server, Credentials, ImageReport, Server, ServerConfig, ServerSession, SessionReport};
pub use shuffle::{ShuffleError, Shuffler};
pub use sweep::{sweep_precision, SweepRow};
pub use transport::{Connection, Duplex, Listener, LoopbackConnector, LoopbackListener, TransportError};
pub use wire::{FailReason, Message, WireError};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("malformed frame: {0}")]
    Wire(#[from] WireError),
    #[error("expected {expected}, got {got}")]
    Unexpected { expected: &'static str, got: &'static str },
    #[error("server rejected the session: {0}")]
    Rejected(FailReason),
    #[error("peer closed the session early")]
    PeerClosed,
    #[error("{what}: expected {expected} ciphertexts, got {got}")]
    Count {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("input pixel {index} = {value} outside [0, 1]")]
    Input { index: usize, value: f64 },
    #[error(transparent)]
    Crypto(#[from] PaillierError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Shuffle(#[from] ShuffleError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl ProtocolError {
    /// Connection-level failures as opposed to protocol or crypto ones.
    pub fn is_transport(&self) -> bool {
        matches!(self, ProtocolError::Transport(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Sent,
    Received,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub direction: Direction,
    pub frame: Vec<u8>,
}

/// Frame-level I/O over a connection, with byte totals and an optional
/// transcript of every raw frame.
pub struct FrameIo {
    conn: Connection,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    transcript: Option<Vec<TranscriptEntry>>,
}

impl FrameIo {
    pub fn new(conn: Connection, record: bool) -> Self {
        FrameIo {
            conn,
            bytes_sent: 0,
            bytes_received: 0,
            transcript: record.then(Vec::new),
        }
    }

    /// Returns the frame length in bytes.
    pub fn send(&mut self, msg: &Message) -> Result<usize, ProtocolError> {
        let frame = wire::encode_frame(msg)?;
        self.conn.write_all(&frame).map_err(TransportError::Io)?;
        self.conn.flush().map_err(TransportError::Io)?;
        self.bytes_sent += frame.len() as u64;
        let len = frame.len();
        if let Some(t) = &mut self.transcript {
            t.push(TranscriptEntry {
                direction: Direction::Sent,
                frame,
            });
        }
        Ok(len)
    }

    pub fn recv(&mut self) -> Result<(Message, usize), ProtocolError> {
        let frame = wire::read_frame(&mut self.conn).map_err(|e| match e {
            wire::ReadFrameError::Eof => ProtocolError::Transport(TransportError::Closed),
            wire::ReadFrameError::Io(e) => ProtocolError::Transport(TransportError::Io(e)),
            wire::ReadFrameError::Wire(w) => ProtocolError::Wire(w),
        })?;
        self.bytes_received += frame.len() as u64;
        let msg = wire::decode_frame(&frame)?;
        let len = frame.len();
        if let Some(t) = &mut self.transcript {
            t.push(TranscriptEntry {
                direction: Direction::Received,
                frame,
            });
        }
        Ok((msg, len))
    }

    /// Best-effort `close`; errors are ignored because the session is over.
    pub fn close_quietly(&mut self) -> usize {
        self.send(&Message::Close).unwrap_or(0)
    }

    pub fn take_transcript(&mut self) -> Vec<TranscriptEntry> {
        self.transcript.as_mut().map(std::mem::take).unwrap_or_default()
    }
}

/// Adds one frame's big-int and byte counts to `c`.
pub(crate) fn tally(c: &mut CostCounters, msg: &Message, frame_bytes: usize, client_to_server: bool) {
    let n = msg.ciphertext_count() as u64;
    let payload = msg.ciphertext_bytes() as u64;
    if client_to_server {
        c.bigints_c2s += n;
        c.bytes_c2s += frame_bytes as u64;
        c.payload_bytes_c2s += payload;
        if let Message::SessionData { n_sq, enc_one, .. } = msg {
            c.key_bigints_c2s += 2;
            c.payload_bytes_c2s += n_sq.bits().div_ceil(8) + enc_one.value().bits().div_ceil(8);
        }
    } else {
        c.bigints_s2c += n;
        c.bytes_s2c += frame_bytes as u64;
        c.payload_bytes_s2c += payload;
    }
}

/// `⟦y_j⟧ = ∏_i ⟦x_i⟧^{w_ij} · ⟦1⟧^{b_j} mod n²`.
///
/// Negative exponents go through `⟦x_i⟧^{-1}`, computed once per input and
/// reused across the layer. Every synapse costs one exponentiation and one
/// multiplication, and so does the bias.
pub fn encrypted_layer_forward(
    ek: &EvaluationKey,
    layer: &QuantizedLayer,
    inputs: &[Ciphertext],
    counters: &mut CostCounters,
) -> Result<Vec<Ciphertext>, ProtocolError> {
    if inputs.len() != layer.fan_in {
        return Err(ProtocolError::Count {
            what: "layer input",
            expected: layer.fan_in,
            got: inputs.len(),
        });
    }
    let n_sq = ek.n_sq();
    let mut inverses: Vec<Option<BigUint>> = vec![None; layer.fan_in];
    let mut one_inverse: Option<BigUint> = None;
    let mut out = Vec::with_capacity(layer.fan_out);
    for j in 0..layer.fan_out {
        let mut acc = BigUint::one();
        for (i, &w) in layer.row(j).iter().enumerate() {
            let base = if w < 0 {
                signed_base(&mut inverses[i], inputs[i].value(), n_sq)?
            } else {
                inputs[i].value()
            };
            let term = mod_pow(base, &BigUint::from(w.unsigned_abs()), n_sq);
            acc = acc * term % n_sq;
        }
        let b = layer.bias[j];
        let base = if b < 0 {
            signed_base(&mut one_inverse, ek.enc_one().value(), n_sq)?
        } else {
            ek.enc_one().value()
        };
        let term = mod_pow(base, &BigUint::from(b.unsigned_abs()), n_sq);
        acc = acc * term % n_sq;
        counters.server_modexp += layer.fan_in as u64 + 1;
        counters.server_modmul += layer.fan_in as u64 + 1;
        out.push(Ciphertext::from_raw(acc));
    }
    Ok(out)
}

fn signed_base<'a>(
    slot: &'a mut Option<BigUint>,
    value: &BigUint,
    n_sq: &BigUint,
) -> Result<&'a BigUint, ProtocolError> {
    if slot.is_none() {
        *slot = Some(mod_inverse(value, n_sq).ok_or(PaillierError::NotInGroup)?);
    }
    Ok(slot.as_ref().expect("filled above"))
}

/// Byte-level scan of what the server saw and kept.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditReport {
    pub found_n_sq: bool,
    pub found_enc_one: bool,
    /// Names of secret or public key parameters found in the scanned bytes.
    pub leaked: Vec<&'static str>,
}

impl AuditReport {
    pub fn clean(&self) -> bool {
        self.found_n_sq && self.found_enc_one && self.leaked.is_empty()
    }
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

/// Looks for the big-endian encodings of `λ, μ, g, p, q` in each blob, and
/// for `n²` and `⟦1⟧`, which are expected to be present.
pub fn audit_server_view(blobs: &[&[u8]], keypair: &Keypair, enc_one: &Ciphertext) -> AuditReport {
    let secrets: [(&'static str, Vec<u8>); 5] = [
        ("lambda", keypair.lambda().to_bytes_be()),
        ("mu", keypair.mu().to_bytes_be()),
        ("g", keypair.g().to_bytes_be()),
        ("p", keypair.p().to_bytes_be()),
        ("q", keypair.q().to_bytes_be()),
    ];
    let n_sq = keypair.n_sq().to_bytes_be();
    let one = enc_one.value().to_bytes_be();
    AuditReport {
        found_n_sq: blobs.iter().any(|b| contains(b, &n_sq)),
        found_enc_one: blobs.iter().any(|b| contains(b, &one)),
        leaked: secrets
            .iter()
            .filter(|(_, s)| blobs.iter().any(|b| contains(b, s)))
            .map(|(name, _)| *name)
            .collect(),
    }
}
