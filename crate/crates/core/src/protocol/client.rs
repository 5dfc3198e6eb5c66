//! Client side: key owner, encryptor and activation oracle.

use std::fmt;
use std::time::{Duration, Instant};

use num_bigint::{BigInt, BigUint};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::transport::Connection;
use super::wire::Message;
use super::{tally, FrameIo, ProtocolError, TranscriptEntry};
use crate::fixedpoint::{self, activate_requantize, bigint_to_i128, logits_to_probabilities, CodecConfig};
use crate::metrics::LayerCounters;
use crate::model::argmax;
use crate::paillier::{to_residue, Ciphertext, Keypair, DEFAULT_KEY_BITS};

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub uid: String,
    pub pwd: String,
    pub key_bits: u64,
    pub frac_bits: u32,
    pub int_bits: u32,
    /// Seeds key generation and encryption nonces; `None` draws from the OS.
    pub seed: Option<u64>,
    /// Keep each image's keypair in its outcome (for audits).
    pub retain_keys: bool,
    /// Record raw frames.
    pub record: bool,
}

impl ClientConfig {
    pub fn new(uid: &str, pwd: &str) -> Self {
        ClientConfig {
            uid: uid.to_string(),
            pwd: pwd.to_string(),
            key_bits: DEFAULT_KEY_BITS,
            frac_bits: fixedpoint::DEFAULT_FRAC_BITS,
            int_bits: fixedpoint::DEFAULT_INT_BITS,
            seed: None,
            retain_keys: false,
            record: false,
        }
    }

    pub fn codec(&self) -> Result<CodecConfig, ProtocolError> {
        Ok(CodecConfig::new(self.frac_bits, self.int_bits, self.key_bits)?)
    }
}

/// Everything the client learned about one image.
#[derive(Debug, Clone)]
pub struct ImageOutcome {
    pub probabilities: Vec<f64>,
    /// Decrypted logits at scale `2^(2·Fl)`, in neuron order.
    pub logits: Vec<i128>,
    /// Decrypted hidden pre-activations per layer, in the (shuffled) order
    /// they arrived.
    pub hidden: Vec<Vec<i128>>,
    pub n: BigUint,
    /// Index 0 is the input layer.
    pub counters: LayerCounters,
    /// Key generation, encryption, decryption and activation.
    pub compute_time: Duration,
    pub wall_time: Duration,
    pub keypair: Option<Keypair>,
    pub enc_one: Ciphertext,
}

impl ImageOutcome {
    /// Class-0 probability.
    pub fn score(&self) -> f64 {
        self.probabilities[0]
    }

    pub fn label(&self) -> usize {
        argmax(&self.probabilities)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ordering {
    /// `D₁` was taken before treatment, `D₂` after.
    FirstBefore,
    SecondBefore,
    /// `R₁ = R₂`.
    Indeterminate,
}

impl fmt::Display for Ordering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ordering::FirstBefore => write!(f, "before=D1 after=D2"),
            Ordering::SecondBefore => write!(f, "before=D2 after=D1"),
            Ordering::Indeterminate => write!(f, "indeterminate"),
        }
    }
}

/// The image with the larger class-0 score is the earlier one.
pub fn decide(r1: f64, r2: f64) -> Ordering {
    if r1 > r2 {
        Ordering::FirstBefore
    } else if r2 > r1 {
        Ordering::SecondBefore
    } else {
        Ordering::Indeterminate
    }
}

#[derive(Debug)]
pub struct Diagnosis {
    pub first: ImageOutcome,
    pub second: ImageOutcome,
    pub ordering: Ordering,
    pub transcript: Vec<TranscriptEntry>,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

impl Diagnosis {
    pub fn counters(&self) -> LayerCounters {
        let mut c = self.first.counters.clone();
        c.merge(&self.second.counters);
        c
    }
}

/// A failed run, with whatever completed before the failure.
#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct DiagnosisError {
    #[source]
    pub error: ProtocolError,
    pub partial: Vec<ImageOutcome>,
    pub transcript: Vec<TranscriptEntry>,
}

pub struct Client {
    cfg: ClientConfig,
    codec: CodecConfig,
    rng: ChaCha20Rng,
}

impl Client {
    pub fn new(cfg: ClientConfig) -> Result<Self, ProtocolError> {
        let codec = cfg.codec()?;
        let rng = match cfg.seed {
            Some(s) => ChaCha20Rng::seed_from_u64(s),
            None => ChaCha20Rng::from_entropy(),
        };
        Ok(Client { cfg, codec, rng })
    }

    pub fn config(&self) -> &ClientConfig {
        &self.cfg
    }

    /// Connects and authenticates.
    pub fn session(&mut self, conn: Connection) -> Result<ClientSession<'_>, ProtocolError> {
        let mut io = FrameIo::new(conn, self.cfg.record);
        io.send(&Message::Hello {
            uid: self.cfg.uid.clone(),
            pwd: self.cfg.pwd.clone(),
        })?;
        match io.recv()?.0 {
            Message::HelloOk => Ok(ClientSession { client: self, io }),
            Message::HelloFail { reason } => Err(ProtocolError::Rejected(reason)),
            other => Err(ProtocolError::Unexpected {
                expected: "hello_ok",
                got: other.name(),
            }),
        }
    }

    /// Runs both images through one session and orders them.
    pub fn diagnose(&mut self, conn: Connection, d1: &[f64], d2: &[f64]) -> Result<Diagnosis, DiagnosisError> {
        let fail = |error, partial, transcript| DiagnosisError {
            error,
            partial,
            transcript,
        };
        let mut sess = self.session(conn).map_err(|e| fail(e, vec![], vec![]))?;
        let mut done = Vec::with_capacity(2);
        for img in [d1, d2] {
            match sess.infer(img) {
                Ok(o) => done.push(o),
                Err(e) => {
                    sess.io.close_quietly();
                    let t = sess.io.take_transcript();
                    return Err(fail(e, done, t));
                }
            }
        }
        let (bytes_sent, bytes_received, transcript) = match sess.close() {
            Ok(v) => v,
            Err(e) => return Err(fail(e, done, vec![])),
        };
        let second = done.pop().expect("two images");
        let first = done.pop().expect("two images");
        Ok(Diagnosis {
            ordering: decide(first.score(), second.score()),
            first,
            second,
            transcript,
            bytes_sent,
            bytes_received,
        })
    }

    /// Classifies a batch over one session.
    pub fn classify(&mut self, conn: Connection, images: &[Vec<f64>]) -> Result<Vec<ImageOutcome>, DiagnosisError> {
        let mut sess = self.session(conn).map_err(|error| DiagnosisError {
            error,
            partial: vec![],
            transcript: vec![],
        })?;
        let mut done = Vec::with_capacity(images.len());
        for img in images {
            match sess.infer(img) {
                Ok(o) => done.push(o),
                Err(error) => {
                    sess.io.close_quietly();
                    let transcript = sess.io.take_transcript();
                    return Err(DiagnosisError {
                        error,
                        partial: done,
                        transcript,
                    });
                }
            }
        }
        let _ = sess.close();
        Ok(done)
    }
}

/// An authenticated connection.
pub struct ClientSession<'a> {
    client: &'a mut Client,
    io: FrameIo,
}

impl ClientSession<'_> {
    /// One image: fresh keypair, encrypted upload, activation rounds,
    /// decrypted logits.
    pub fn infer(&mut self, image: &[f64]) -> Result<ImageOutcome, ProtocolError> {
        let wall = Instant::now();
        if let Some((index, &value)) = image
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(ProtocolError::Input { index, value });
        }
        let Client { cfg, codec, rng } = &mut *self.client;
        let mut counters = LayerCounters::with_layers(1);

        let t = Instant::now();
        let keypair = Keypair::generate(cfg.key_bits, rng)?;
        let n = keypair.n().clone();
        let ek = keypair.evaluation_key(rng);
        counters.layer_mut(0).client_encrypt(1);
        let mut cts = Vec::with_capacity(image.len());
        for &x in image {
            let v = fixedpoint::encode_int(x, codec)?;
            cts.push(keypair.encrypt(&to_residue(&BigInt::from(v), &n), rng)?);
        }
        counters.layer_mut(0).client_encrypt(image.len() as u64);
        let mut compute_time = t.elapsed();

        let msg = Message::SessionData {
            n_sq: keypair.n_sq().clone(),
            enc_one: ek.enc_one().clone(),
            ciphertexts: cts,
        };
        let bytes = self.io.send(&msg)?;
        tally(counters.layer_mut(0), &msg, bytes, true);

        let mut hidden = Vec::new();
        let mut k = 1;
        loop {
            let (msg, bytes) = self.io.recv()?;
            tally(counters.layer_mut(k), &msg, bytes, false);
            match msg {
                Message::ActQuery {
                    activation,
                    ciphertexts,
                } => {
                    let t = Instant::now();
                    let pre = decrypt_all(&keypair, &ciphertexts)?;
                    counters.layer_mut(k).client_decrypt(pre.len() as u64);
                    let acts = activate_requantize(&pre, activation, cfg.frac_bits, cfg.int_bits)?;
                    let reply = acts
                        .iter()
                        .map(|&a| keypair.encrypt_signed(&BigInt::from(a), rng))
                        .collect::<Result<Vec<_>, _>>()?;
                    counters.layer_mut(k).client_encrypt(reply.len() as u64);
                    compute_time += t.elapsed();
                    hidden.push(pre);
                    let msg = Message::ActReply { ciphertexts: reply };
                    let bytes = self.io.send(&msg)?;
                    tally(counters.layer_mut(k), &msg, bytes, true);
                    k += 1;
                }
                Message::Result { ciphertexts } => {
                    let t = Instant::now();
                    let logits = decrypt_all(&keypair, &ciphertexts)?;
                    counters.layer_mut(k).client_decrypt(logits.len() as u64);
                    let probabilities = logits_to_probabilities(&logits, cfg.frac_bits);
                    compute_time += t.elapsed();
                    return Ok(ImageOutcome {
                        probabilities,
                        logits,
                        hidden,
                        n,
                        counters,
                        compute_time,
                        wall_time: wall.elapsed(),
                        enc_one: ek.enc_one().clone(),
                        keypair: cfg.retain_keys.then_some(keypair),
                    });
                }
                Message::HelloFail { reason } => return Err(ProtocolError::Rejected(reason)),
                Message::Close => return Err(ProtocolError::PeerClosed),
                other => {
                    return Err(ProtocolError::Unexpected {
                        expected: "act_query or result",
                        got: other.name(),
                    })
                }
            }
        }
    }

    /// Sends `close`; returns byte totals and the transcript.
    pub fn close(mut self) -> Result<(u64, u64, Vec<TranscriptEntry>), ProtocolError> {
        self.io.send(&Message::Close)?;
        Ok((self.io.bytes_sent, self.io.bytes_received, self.io.take_transcript()))
    }
}

/// Decrypts with the group check first; any value outside `Z*_{n²}` aborts.
fn decrypt_all(keypair: &Keypair, cts: &[Ciphertext]) -> Result<Vec<i128>, ProtocolError> {
    cts.iter()
        .map(|c| {
            keypair.public_key().check(c)?;
            Ok(bigint_to_i128(&keypair.decrypt_signed(c)?)?)
        })
        .collect()
}
