//! Server session state machine.
//!
//! The server holds the quantized model and, per image, the client's
//! evaluation key. It never receives `g`, `λ`, `μ`, `p` or `q`.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering as AtomicOrdering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::transport::{loopback, Connection, Listener, LoopbackConnector, TransportError};
use super::wire::{activation_tag, FailReason, Message};
use super::{encrypted_layer_forward, tally, FrameIo, ProtocolError, Shuffler, TranscriptEntry};
use crate::fixedpoint::{CodecError, QuantizedModel};
use crate::metrics::{CostCounters, LayerCounters};
use crate::paillier::{Ciphertext, EvaluationKey};

/// `uid → password`, loaded from `uid:password` lines.
#[derive(Debug, Clone, Default)]
pub struct Credentials(HashMap<String, String>);

impl Credentials {
    pub fn single(uid: &str, pwd: &str) -> Self {
        Credentials(HashMap::from([(uid.to_string(), pwd.to_string())]))
    }

    /// Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut map = HashMap::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (uid, pwd) = line
                .split_once(':')
                .ok_or_else(|| format!("line {}: expected `uid:password`", no + 1))?;
            if uid.is_empty() {
                return Err(format!("line {}: empty uid", no + 1));
            }
            map.insert(uid.to_string(), pwd.to_string());
        }
        Ok(Credentials(map))
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn verify(&self, uid: &str, pwd: &str) -> bool {
        self.0.get(uid).is_some_and(|p| p == pwd)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// Sessions announcing a smaller modulus are refused.
    pub min_key_bits: u64,
    /// Seeds the per-session shuffle RNG; `None` draws from the OS.
    pub seed: Option<u64>,
    /// Keep raw frames and state snapshots in the session report.
    pub record: bool,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            min_key_bits: 256,
            seed: None,
            record: false,
        }
    }
}

/// Per-session server state. Nothing in here can decrypt.
pub struct ServerSession {
    model: Arc<QuantizedModel>,
    eval_key: Option<EvaluationKey>,
    layer_index: usize,
    shuffler: Shuffler,
    counters: LayerCounters,
    rng: ChaCha20Rng,
}

impl ServerSession {
    pub fn new(model: Arc<QuantizedModel>, rng: ChaCha20Rng) -> Self {
        let layers = model.layers.len() + 1;
        ServerSession {
            model,
            eval_key: None,
            layer_index: 0,
            shuffler: Shuffler::new(),
            counters: LayerCounters::with_layers(layers),
            rng,
        }
    }

    pub fn model(&self) -> &QuantizedModel {
        &self.model
    }

    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn eval_key(&self) -> Option<&EvaluationKey> {
        self.eval_key.as_ref()
    }

    pub fn counters(&self) -> &LayerCounters {
        &self.counters
    }

    /// Installs a new evaluation key and rewinds to the first layer.
    pub fn begin_image(&mut self, ek: EvaluationKey) {
        self.eval_key = Some(ek);
        self.layer_index = 0;
        self.shuffler = Shuffler::new();
        self.counters = LayerCounters::with_layers(self.model.layers.len() + 1);
    }

    /// Evaluates the next layer and advances the cursor.
    pub fn forward_layer(&mut self, inputs: &[Ciphertext]) -> Result<Vec<Ciphertext>, ProtocolError> {
        let ek = self.eval_key.as_ref().ok_or(ProtocolError::Unexpected {
            expected: "session_data",
            got: "layer input",
        })?;
        let layer = self.model.layers.get(self.layer_index).ok_or(ProtocolError::Unexpected {
            expected: "close or session_data",
            got: "extra layer",
        })?;
        let k = self.layer_index + 1;
        let out = encrypted_layer_forward(ek, layer, inputs, self.counters.layer_mut(k))?;
        self.layer_index += 1;
        Ok(out)
    }

    pub fn shuffle_out(&mut self, v: Vec<Ciphertext>) -> Result<Vec<Ciphertext>, ProtocolError> {
        Ok(self.shuffler.shuffle_out(v, &mut self.rng)?)
    }

    pub fn unshuffle_in(&mut self, v: Vec<Ciphertext>) -> Result<Vec<Ciphertext>, ProtocolError> {
        Ok(self.shuffler.unshuffle_in(v)?)
    }

    /// Everything the session holds, serialized: quantized parameters,
    /// evaluation key, cursor, pending permutation and counters.
    pub fn snapshot(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"model");
        for layer in &self.model.layers {
            for w in &layer.weights {
                out.extend_from_slice(&w.to_be_bytes());
            }
            for b in &layer.bias {
                out.extend_from_slice(&b.to_be_bytes());
            }
        }
        out.extend_from_slice(b"evalkey");
        if let Some(ek) = &self.eval_key {
            for v in [ek.n_sq(), ek.enc_one().value()] {
                let bytes = v.to_bytes_be();
                out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
                out.extend_from_slice(&bytes);
            }
        }
        out.extend_from_slice(b"cursor");
        out.extend_from_slice(&(self.layer_index as u64).to_be_bytes());
        out.extend_from_slice(b"pending");
        for &i in self.shuffler.pending().unwrap_or(&[]) {
            out.extend_from_slice(&(i as u32).to_be_bytes());
        }
        out.extend_from_slice(b"counters");
        for c in &self.counters.0 {
            for v in [c.server_modexp, c.server_modmul, c.bigints_s2c, c.bigints_c2s] {
                out.extend_from_slice(&v.to_be_bytes());
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct ImageReport {
    pub modulus_bits: u64,
    /// Index 0 is the input layer.
    pub counters: LayerCounters,
    /// Time spent in layer evaluation and shuffling.
    pub compute_time: Duration,
}

#[derive(Debug)]
pub struct SessionReport {
    pub session_id: u64,
    pub uid: Option<String>,
    pub authenticated: bool,
    pub images: Vec<ImageReport>,
    /// Every frame byte, handshake and refusals included.
    pub bytes_received: u64,
    pub bytes_sent: u64,
    pub transcript: Vec<TranscriptEntry>,
    pub snapshots: Vec<Vec<u8>>,
    pub error: Option<ProtocolError>,
}

impl SessionReport {
    pub fn total(&self) -> CostCounters {
        self.images
            .iter()
            .fold(CostCounters::default(), |acc, i| acc + i.counters.total())
    }

    pub fn compute_time(&self) -> Duration {
        self.images.iter().map(|i| i.compute_time).sum()
    }

    /// Inbound frames, as raw bytes.
    pub fn inbound_frames(&self) -> Vec<&[u8]> {
        self.transcript
            .iter()
            .filter(|t| t.direction == super::Direction::Received)
            .map(|t| t.frame.as_slice())
            .collect()
    }
}

pub struct Server {
    model: Arc<QuantizedModel>,
    credentials: Credentials,
    config: ServerConfig,
    next_id: AtomicU64,
}

impl Server {
    /// Fails if the model cannot be evaluated under the smallest accepted key.
    pub fn new(model: QuantizedModel, credentials: Credentials, config: ServerConfig) -> Result<Self, CodecError> {
        model.check_modulus(config.min_key_bits)?;
        Ok(Server {
            model: Arc::new(model),
            credentials,
            config,
            next_id: AtomicU64::new(0),
        })
    }

    pub fn model(&self) -> &QuantizedModel {
        &self.model
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    fn session_rng(&self, id: u64) -> ChaCha20Rng {
        match self.config.seed {
            Some(seed) => {
                let mut rng = ChaCha20Rng::seed_from_u64(seed);
                rng.set_stream(id);
                rng
            }
            None => ChaCha20Rng::from_entropy(),
        }
    }

    /// Runs one connection to completion. Errors end up in the report.
    pub fn handle_session(&self, conn: Connection) -> SessionReport {
        let id = self.next_id.fetch_add(1, AtomicOrdering::Relaxed);
        let mut io = FrameIo::new(conn, self.config.record);
        let mut sess = ServerSession::new(self.model.clone(), self.session_rng(id));
        let mut report = SessionReport {
            session_id: id,
            uid: None,
            authenticated: false,
            images: Vec::new(),
            bytes_received: 0,
            bytes_sent: 0,
            transcript: Vec::new(),
            snapshots: Vec::new(),
            error: None,
        };
        if let Err(e) = self.drive(&mut io, &mut sess, &mut report) {
            report.error = Some(e);
        }
        report.transcript = io.take_transcript();
        report.bytes_received = io.bytes_received;
        report.bytes_sent = io.bytes_sent;
        report
    }

    fn refuse(io: &mut FrameIo, reason: FailReason) -> ProtocolError {
        let _ = io.send(&Message::HelloFail { reason });
        io.close_quietly();
        ProtocolError::Rejected(reason)
    }

    fn drive(&self, io: &mut FrameIo, sess: &mut ServerSession, report: &mut SessionReport) -> Result<(), ProtocolError> {
        let (msg, _) = io.recv()?;
        let Message::Hello { uid, pwd } = msg else {
            io.close_quietly();
            return Err(ProtocolError::Unexpected {
                expected: "hello",
                got: msg.name(),
            });
        };
        report.uid = Some(uid.clone());
        if !self.credentials.verify(&uid, &pwd) {
            log::info!("session {}: authentication failed for `{uid}`", report.session_id);
            return Err(Self::refuse(io, FailReason::BadCredentials));
        }
        report.authenticated = true;
        io.send(&Message::HelloOk)?;

        loop {
            let (msg, bytes) = io.recv()?;
            match msg {
                Message::Close => return Ok(()),
                Message::SessionData { .. } => {
                    let image = self.run_image(io, sess, msg, bytes, report)?;
                    report.images.push(image);
                }
                other => {
                    io.close_quietly();
                    return Err(ProtocolError::Unexpected {
                        expected: "session_data or close",
                        got: other.name(),
                    });
                }
            }
        }
    }

    fn run_image(
        &self,
        io: &mut FrameIo,
        sess: &mut ServerSession,
        msg: Message,
        bytes: usize,
        report: &mut SessionReport,
    ) -> Result<ImageReport, ProtocolError> {
        let mut input_counters = CostCounters::default();
        tally(&mut input_counters, &msg, bytes, true);
        let Message::SessionData {
            n_sq,
            enc_one,
            ciphertexts,
        } = msg
        else {
            unreachable!("caller matched session_data");
        };
        let ek = match EvaluationKey::new(n_sq, enc_one) {
            Ok(ek) => ek,
            Err(e) => {
                Self::refuse(io, FailReason::InvalidSession);
                return Err(e.into());
            }
        };
        let modulus_bits = ek.modulus_bits();
        if modulus_bits < self.config.min_key_bits || self.model.check_modulus(modulus_bits).is_err() {
            log::info!(
                "session {}: refusing {modulus_bits}-bit key (minimum {})",
                report.session_id,
                required_key_bits(&self.model, self.config.min_key_bits)
            );
            return Err(Self::refuse(io, FailReason::KeyTooSmall));
        }
        if ciphertexts.len() != self.model.input_dim {
            Self::refuse(io, FailReason::InvalidSession);
            return Err(ProtocolError::Count {
                what: "session_data",
                expected: self.model.input_dim,
                got: ciphertexts.len(),
            });
        }
        if let Some(bad) = ciphertexts.iter().find(|c| ek.check(c).is_err()) {
            log::info!("session {}: input ciphertext {bad:?} outside the group", report.session_id);
            Self::refuse(io, FailReason::InvalidSession);
            return Err(crate::paillier::PaillierError::NotInGroup.into());
        }

        sess.begin_image(ek);
        *sess.counters.layer_mut(0) += input_counters;
        let layers = self.model.layers.len();
        let mut compute_time = Duration::ZERO;
        let mut x = ciphertexts;
        for k in 1..=layers {
            let t = Instant::now();
            let y = sess.forward_layer(&x)?;
            if k == layers {
                compute_time += t.elapsed();
                if self.config.record {
                    report.snapshots.push(sess.snapshot());
                }
                let msg = Message::Result { ciphertexts: y };
                let bytes = io.send(&msg)?;
                tally(sess.counters.layer_mut(k), &msg, bytes, false);
                break;
            }
            let activation = self.model.layers[k - 1].activation;
            let shuffled = sess.shuffle_out(y)?;
            compute_time += t.elapsed();
            debug_assert!(activation_tag(activation).is_some());
            let msg = Message::ActQuery {
                activation,
                ciphertexts: shuffled,
            };
            let bytes = io.send(&msg)?;
            tally(sess.counters.layer_mut(k), &msg, bytes, false);

            let (reply, bytes) = io.recv()?;
            tally(sess.counters.layer_mut(k), &reply, bytes, true);
            let Message::ActReply { ciphertexts } = reply else {
                if reply != Message::Close {
                    io.close_quietly();
                }
                return Err(ProtocolError::Unexpected {
                    expected: "act_reply",
                    got: reply.name(),
                });
            };
            let ek = sess.eval_key().expect("installed above");
            if ciphertexts.iter().any(|c| ek.check(c).is_err()) {
                io.close_quietly();
                return Err(crate::paillier::PaillierError::NotInGroup.into());
            }
            let t = Instant::now();
            x = match sess.unshuffle_in(ciphertexts) {
                Ok(x) => x,
                Err(e) => {
                    io.close_quietly();
                    return Err(e);
                }
            };
            compute_time += t.elapsed();
        }
        Ok(ImageReport {
            modulus_bits,
            counters: sess.counters.clone(),
            compute_time,
        })
    }

    /// Accepts connections until `shutdown` is set, the listener goes away
    /// or `max_sessions` connections have been accepted, then waits for every
    /// running session to finish. Returns the number of sessions served.
    pub fn serve<L, F>(
        &self,
        mut listener: L,
        shutdown: &AtomicBool,
        max_sessions: Option<usize>,
        on_report: F,
    ) -> Result<usize, TransportError>
    where
        L: Listener,
        F: Fn(SessionReport) + Sync,
    {
        let poll = Duration::from_millis(50);
        let mut accepted = 0usize;
        let mut failure = None;
        std::thread::scope(|scope| {
            while !shutdown.load(AtomicOrdering::SeqCst) && max_sessions.is_none_or(|m| accepted < m) {
                match listener.accept_timeout(poll) {
                    Ok(Some(conn)) => {
                        accepted += 1;
                        let on_report = &on_report;
                        scope.spawn(move || on_report(self.handle_session(conn)));
                    }
                    Ok(None) => {}
                    Err(TransportError::ListenerGone) => break,
                    Err(e) => {
                        failure = Some(e);
                        break;
                    }
                }
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(accepted),
        }
    }
}

/// Runs `server` on an in-process listener in a background thread. The
/// thread exits once every connector clone is dropped and returns all
/// session reports in completion order.
pub fn spawn_loopback_server(server: Arc<Server>) -> (LoopbackConnector, JoinHandle<Vec<SessionReport>>) {
    let (listener, connector) = loopback();
    let handle = std::thread::spawn(move || {
        let reports = Mutex::new(Vec::new());
        let never = AtomicBool::new(false);
        let _ = server.serve(listener, &never, None, |r| reports.lock().expect("poisoned").push(r));
        reports.into_inner().expect("poisoned")
    });
    (connector, handle)
}

/// Smallest modulus a model can run under, accounting for the server floor.
pub fn required_key_bits(model: &QuantizedModel, floor: u64) -> u64 {
    floor.max(model.codec(0).min_modulus_bits(model.max_fan_in()))
}
