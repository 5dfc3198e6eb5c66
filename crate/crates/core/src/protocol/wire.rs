//! Frame codec.
//!
//! ```text
//! frame    = magic:u8  length:u32  payload[length]
//! payload  = kind:u8  fields...
//! BigInt   = length:u32  magnitude[length]     (big-endian, no leading zeros)
//! ```
//!
//! All integers are big-endian. `length` counts the payload only, so the
//! smallest frame (`close`) is six bytes.

use std::io::Read;

use num_bigint::BigUint;
use thiserror::Error;

use crate::model::Activation;
use crate::paillier::Ciphertext;

pub const FRAME_MAGIC: u8 = 0xA7;
pub const HEADER_LEN: usize = 5;
pub const MAX_PAYLOAD: usize = 64 << 20;

pub const KIND_HELLO: u8 = 0x01;
pub const KIND_HELLO_OK: u8 = 0x02;
pub const KIND_HELLO_FAIL: u8 = 0x03;
pub const KIND_SESSION_DATA: u8 = 0x10;
pub const KIND_ACT_QUERY: u8 = 0x20;
pub const KIND_ACT_REPLY: u8 = 0x21;
pub const KIND_RESULT: u8 = 0x30;
pub const KIND_CLOSE: u8 = 0x3F;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("bad frame magic 0x{0:02x}")]
    BadMagic(u8),
    #[error("unknown message kind 0x{0:02x}")]
    UnknownKind(u8),
    #[error("payload of {0} bytes exceeds the frame cap")]
    TooLarge(usize),
    #[error("truncated at byte {offset}: need {needed} more")]
    Truncated { offset: usize, needed: usize },
    #[error("field at byte {offset} overruns the payload")]
    LengthOverrun { offset: usize },
    #[error("{0} trailing bytes after message")]
    TrailingBytes(usize),
    #[error("unknown activation tag {0}")]
    BadActivation(u8),
    #[error("string field is not UTF-8")]
    BadUtf8,
    #[error("string field longer than 65535 bytes")]
    StringTooLong,
    #[error("big integer has a leading zero byte")]
    NonCanonical,
    #[error("empty payload")]
    EmptyPayload,
}

/// Reason codes carried by `hello_fail`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailReason {
    BadCredentials,
    KeyTooSmall,
    InvalidSession,
    Other(u8),
}

impl FailReason {
    pub fn code(self) -> u8 {
        match self {
            FailReason::BadCredentials => 1,
            FailReason::KeyTooSmall => 2,
            FailReason::InvalidSession => 3,
            FailReason::Other(c) => c,
        }
    }

    pub fn from_code(c: u8) -> Self {
        match c {
            1 => FailReason::BadCredentials,
            2 => FailReason::KeyTooSmall,
            3 => FailReason::InvalidSession,
            c => FailReason::Other(c),
        }
    }
}

impl std::fmt::Display for FailReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FailReason::BadCredentials => write!(f, "bad credentials"),
            FailReason::KeyTooSmall => write!(f, "key too small for the model"),
            FailReason::InvalidSession => write!(f, "invalid session data"),
            FailReason::Other(c) => write!(f, "reason code {c}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Hello { uid: String, pwd: String },
    HelloOk,
    HelloFail { reason: FailReason },
    SessionData {
        n_sq: BigUint,
        enc_one: Ciphertext,
        ciphertexts: Vec<Ciphertext>,
    },
    ActQuery {
        activation: Activation,
        ciphertexts: Vec<Ciphertext>,
    },
    ActReply { ciphertexts: Vec<Ciphertext> },
    Result { ciphertexts: Vec<Ciphertext> },
    Close,
}

impl Message {
    pub fn kind(&self) -> u8 {
        match self {
            Message::Hello { .. } => KIND_HELLO,
            Message::HelloOk => KIND_HELLO_OK,
            Message::HelloFail { .. } => KIND_HELLO_FAIL,
            Message::SessionData { .. } => KIND_SESSION_DATA,
            Message::ActQuery { .. } => KIND_ACT_QUERY,
            Message::ActReply { .. } => KIND_ACT_REPLY,
            Message::Result { .. } => KIND_RESULT,
            Message::Close => KIND_CLOSE,
        }
    }

    pub fn name(&self) -> &'static str {
        kind_name(self.kind())
    }

    /// Data ciphertexts carried, excluding key material.
    pub fn ciphertext_count(&self) -> usize {
        match self {
            Message::SessionData { ciphertexts, .. }
            | Message::ActQuery { ciphertexts, .. }
            | Message::ActReply { ciphertexts }
            | Message::Result { ciphertexts } => ciphertexts.len(),
            _ => 0,
        }
    }

    /// Magnitude bytes of the data ciphertexts.
    pub fn ciphertext_bytes(&self) -> usize {
        match self {
            Message::SessionData { ciphertexts, .. }
            | Message::ActQuery { ciphertexts, .. }
            | Message::ActReply { ciphertexts }
            | Message::Result { ciphertexts } => ciphertexts.iter().map(|c| magnitude_len(c.value())).sum(),
            _ => 0,
        }
    }
}

pub fn kind_name(kind: u8) -> &'static str {
    match kind {
        KIND_HELLO => "hello",
        KIND_HELLO_OK => "hello_ok",
        KIND_HELLO_FAIL => "hello_fail",
        KIND_SESSION_DATA => "session_data",
        KIND_ACT_QUERY => "act_query",
        KIND_ACT_REPLY => "act_reply",
        KIND_RESULT => "result",
        KIND_CLOSE => "close",
        _ => "unknown",
    }
}

pub fn activation_tag(a: Activation) -> Option<u8> {
    match a {
        Activation::Sigmoid => Some(1),
        Activation::Relu => Some(2),
        Activation::Softmax => None,
    }
}

fn magnitude_len(v: &BigUint) -> usize {
    (v.bits() as usize).div_ceil(8)
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_be_bytes());
}

fn put_bigint(out: &mut Vec<u8>, v: &BigUint) {
    let len = magnitude_len(v);
    put_u32(out, len);
    if len > 0 {
        out.extend_from_slice(&v.to_bytes_be());
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<(), WireError> {
    let len = u16::try_from(s.len()).map_err(|_| WireError::StringTooLong)?;
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_cts(out: &mut Vec<u8>, cts: &[Ciphertext]) {
    put_u32(out, cts.len());
    for c in cts {
        put_bigint(out, c.value());
    }
}

/// Payload bytes (kind tag and fields) without the frame header.
pub fn encode_payload(msg: &Message) -> Result<Vec<u8>, WireError> {
    let mut out = vec![msg.kind()];
    match msg {
        Message::Hello { uid, pwd } => {
            put_str(&mut out, uid)?;
            put_str(&mut out, pwd)?;
        }
        Message::HelloOk | Message::Close => {}
        Message::HelloFail { reason } => out.push(reason.code()),
        Message::SessionData {
            n_sq,
            enc_one,
            ciphertexts,
        } => {
            put_bigint(&mut out, n_sq);
            put_bigint(&mut out, enc_one.value());
            put_cts(&mut out, ciphertexts);
        }
        Message::ActQuery {
            activation,
            ciphertexts,
        } => {
            let tag = activation_tag(*activation).ok_or(WireError::BadActivation(0))?;
            out.push(tag);
            put_cts(&mut out, ciphertexts);
        }
        Message::ActReply { ciphertexts } | Message::Result { ciphertexts } => put_cts(&mut out, ciphertexts),
    }
    if out.len() > MAX_PAYLOAD {
        return Err(WireError::TooLarge(out.len()));
    }
    Ok(out)
}

pub fn encode_frame(msg: &Message) -> Result<Vec<u8>, WireError> {
    let payload = encode_payload(msg)?;
    let mut frame = Vec::with_capacity(HEADER_LEN + payload.len());
    frame.push(FRAME_MAGIC);
    put_u32(&mut frame, payload.len());
    frame.extend_from_slice(&payload);
    Ok(frame)
}

/// Validates a header and returns the payload length.
pub fn parse_header(header: &[u8; HEADER_LEN]) -> Result<usize, WireError> {
    if header[0] != FRAME_MAGIC {
        return Err(WireError::BadMagic(header[0]));
    }
    let len = u32::from_be_bytes([header[1], header[2], header[3], header[4]]) as usize;
    if len > MAX_PAYLOAD {
        return Err(WireError::TooLarge(len));
    }
    Ok(len)
}

/// Decodes exactly one frame; the buffer must hold nothing else.
pub fn decode_frame(bytes: &[u8]) -> Result<Message, WireError> {
    if bytes.len() < HEADER_LEN {
        if let Some(&m) = bytes.first() {
            if m != FRAME_MAGIC {
                return Err(WireError::BadMagic(m));
            }
        }
        return Err(WireError::Truncated {
            offset: bytes.len(),
            needed: HEADER_LEN - bytes.len(),
        });
    }
    let header: &[u8; HEADER_LEN] = bytes[..HEADER_LEN].try_into().expect("length checked");
    let len = parse_header(header)?;
    let rest = &bytes[HEADER_LEN..];
    if rest.len() < len {
        return Err(WireError::Truncated {
            offset: bytes.len(),
            needed: len - rest.len(),
        });
    }
    if rest.len() > len {
        return Err(WireError::TrailingBytes(rest.len() - len));
    }
    decode_payload(rest).map_err(|e| shift_offset(e, HEADER_LEN))
}

fn shift_offset(e: WireError, by: usize) -> WireError {
    match e {
        WireError::LengthOverrun { offset } => WireError::LengthOverrun { offset: offset + by },
        other => other,
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() - self.pos < n {
            return Err(WireError::LengthOverrun { offset: self.pos });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<usize, WireError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]) as usize)
    }

    fn u32(&mut self) -> Result<usize, WireError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String, WireError> {
        let len = self.u16()?;
        let b = self.take(len)?;
        String::from_utf8(b.to_vec()).map_err(|_| WireError::BadUtf8)
    }

    fn bigint(&mut self) -> Result<BigUint, WireError> {
        let len = self.u32()?;
        let b = self.take(len)?;
        if b.first() == Some(&0) {
            return Err(WireError::NonCanonical);
        }
        Ok(BigUint::from_bytes_be(b))
    }

    fn cts(&mut self) -> Result<Vec<Ciphertext>, WireError> {
        let count = self.u32()?;
        // every BigInt needs at least its 4-byte length
        if count > (self.buf.len() - self.pos) / 4 {
            return Err(WireError::LengthOverrun { offset: self.pos });
        }
        (0..count).map(|_| self.bigint().map(Ciphertext::from_raw)).collect()
    }
}

pub fn decode_payload(payload: &[u8]) -> Result<Message, WireError> {
    let mut cur = Cursor { buf: payload, pos: 0 };
    let kind = cur.u8().map_err(|_| WireError::EmptyPayload)?;
    let msg = match kind {
        KIND_HELLO => Message::Hello {
            uid: cur.string()?,
            pwd: cur.string()?,
        },
        KIND_HELLO_OK => Message::HelloOk,
        KIND_HELLO_FAIL => Message::HelloFail {
            reason: FailReason::from_code(cur.u8()?),
        },
        KIND_SESSION_DATA => Message::SessionData {
            n_sq: cur.bigint()?,
            enc_one: Ciphertext::from_raw(cur.bigint()?),
            ciphertexts: cur.cts()?,
        },
        KIND_ACT_QUERY => {
            let activation = match cur.u8()? {
                1 => Activation::Sigmoid,
                2 => Activation::Relu,
                t => return Err(WireError::BadActivation(t)),
            };
            Message::ActQuery {
                activation,
                ciphertexts: cur.cts()?,
            }
        }
        KIND_ACT_REPLY => Message::ActReply { ciphertexts: cur.cts()? },
        KIND_RESULT => Message::Result { ciphertexts: cur.cts()? },
        KIND_CLOSE => Message::Close,
        k => return Err(WireError::UnknownKind(k)),
    };
    if cur.pos != payload.len() {
        return Err(WireError::TrailingBytes(payload.len() - cur.pos));
    }
    Ok(msg)
}

/// Errors from reading a frame off a byte stream.
#[derive(Debug, Error)]
pub enum ReadFrameError {
    /// Stream ended cleanly on a frame boundary.
    #[error("stream closed")]
    Eof,
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Io(std::io::Error),
}

fn read_full<R: Read + ?Sized>(r: &mut R, buf: &mut [u8], consumed: usize) -> Result<(), ReadFrameError> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 && consumed == 0 => return Err(ReadFrameError::Eof),
            Ok(0) => {
                return Err(WireError::Truncated {
                    offset: consumed + filled,
                    needed: buf.len() - filled,
                }
                .into())
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(ReadFrameError::Io(e)),
        }
    }
    Ok(())
}

/// Reads one raw frame (header included) from a stream.
pub fn read_frame<R: Read + ?Sized>(r: &mut R) -> Result<Vec<u8>, ReadFrameError> {
    let mut header = [0u8; HEADER_LEN];
    read_full(r, &mut header, 0)?;
    let len = parse_header(&header)?;
    let mut frame = vec![0u8; HEADER_LEN + len];
    frame[..HEADER_LEN].copy_from_slice(&header);
    read_full(r, &mut frame[HEADER_LEN..], HEADER_LEN)?;
    Ok(frame)
}
