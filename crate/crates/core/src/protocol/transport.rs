//! Byte-stream transports: TCP and an in-process loopback.

use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use thiserror::Error;

/// An ordered, reliable, bidirectional byte stream.
pub trait Duplex: Read + Write + Send {}

impl<T: Read + Write + Send> Duplex for T {}

pub type Connection = Box<dyn Duplex>;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("connect to {endpoint}: {source}")]
    Connect { endpoint: String, source: io::Error },
    #[error("bind {endpoint}: {source}")]
    Bind { endpoint: String, source: io::Error },
    #[error("peer closed the connection")]
    Closed,
    #[error("transport i/o: {0}")]
    Io(#[from] io::Error),
    #[error("loopback listener is gone")]
    ListenerGone,
}

pub fn tcp_connect(endpoint: &str) -> Result<Connection, TransportError> {
    let connect_err = |source| TransportError::Connect {
        endpoint: endpoint.to_string(),
        source,
    };
    let addrs: Vec<_> = endpoint.to_socket_addrs().map_err(connect_err)?.collect();
    let stream = TcpStream::connect(&addrs[..]).map_err(connect_err)?;
    stream.set_nodelay(true)?;
    Ok(Box::new(stream))
}

pub fn tcp_listen(endpoint: &str) -> Result<TcpListener, TransportError> {
    TcpListener::bind(endpoint).map_err(|source| TransportError::Bind {
        endpoint: endpoint.to_string(),
        source,
    })
}

/// One end of an in-process byte pipe.
pub struct LoopbackStream {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    pending: Vec<u8>,
    offset: usize,
}

impl LoopbackStream {
    pub fn pair() -> (LoopbackStream, LoopbackStream) {
        let (atx, brx) = mpsc::channel();
        let (btx, arx) = mpsc::channel();
        (
            LoopbackStream {
                tx: atx,
                rx: arx,
                pending: Vec::new(),
                offset: 0,
            },
            LoopbackStream {
                tx: btx,
                rx: brx,
                pending: Vec::new(),
                offset: 0,
            },
        )
    }
}

impl Read for LoopbackStream {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        if buf.is_empty() {
            return Ok(0);
        }
        while self.offset == self.pending.len() {
            match self.rx.recv() {
                Ok(chunk) => {
                    self.pending = chunk;
                    self.offset = 0;
                }
                // peer dropped: end of stream
                Err(_) => return Ok(0),
            }
        }
        let n = buf.len().min(self.pending.len() - self.offset);
        buf[..n].copy_from_slice(&self.pending[self.offset..self.offset + n]);
        self.offset += n;
        Ok(n)
    }
}

impl Write for LoopbackStream {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        if buf.is_empty() {
            return Ok(0);
        }
        self.tx
            .send(buf.to_vec())
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "loopback peer dropped"))?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Accept side of the loopback transport.
pub struct LoopbackListener {
    incoming: Receiver<LoopbackStream>,
}

/// Cloneable dialer for a [`LoopbackListener`].
#[derive(Clone)]
pub struct LoopbackConnector {
    tx: Sender<LoopbackStream>,
}

pub fn loopback() -> (LoopbackListener, LoopbackConnector) {
    let (tx, rx) = mpsc::channel();
    (LoopbackListener { incoming: rx }, LoopbackConnector { tx })
}

impl LoopbackConnector {
    pub fn connect(&self) -> Result<Connection, TransportError> {
        let (client, server) = LoopbackStream::pair();
        self.tx.send(server).map_err(|_| TransportError::ListenerGone)?;
        Ok(Box::new(client))
    }
}

/// Source of incoming connections for the session server.
pub trait Listener {
    /// Waits up to `timeout`; `Ok(None)` on timeout, `Err(ListenerGone)` when
    /// no more connections can arrive.
    fn accept_timeout(&mut self, timeout: Duration) -> Result<Option<Connection>, TransportError>;
}

impl Listener for LoopbackListener {
    fn accept_timeout(&mut self, timeout: Duration) -> Result<Option<Connection>, TransportError> {
        match self.incoming.recv_timeout(timeout) {
            Ok(s) => Ok(Some(Box::new(s))),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(TransportError::ListenerGone),
        }
    }
}

impl Listener for TcpListener {
    fn accept_timeout(&mut self, timeout: Duration) -> Result<Option<Connection>, TransportError> {
        self.set_nonblocking(true)?;
        let step = Duration::from_millis(10);
        let mut waited = Duration::ZERO;
        loop {
            match self.accept() {
                Ok((stream, _)) => {
                    stream.set_nonblocking(false)?;
                    stream.set_nodelay(true)?;
                    return Ok(Some(Box::new(stream)));
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if waited >= timeout {
                        return Ok(None);
                    }
                    std::thread::sleep(step);
                    waited += step;
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::wire::{decode_frame, encode_frame, read_frame, Message};

    #[test]
    fn loopback_echo_of_frame() {
        let (mut a, mut b) = LoopbackStream::pair();
        let f = encode_frame(&Message::Hello {
            uid: "u".into(),
            pwd: "p".into(),
        })
        .unwrap();
        a.write_all(&f).unwrap();
        let got = read_frame(&mut b).unwrap();
        b.write_all(&got).unwrap();
        let back = read_frame(&mut a).unwrap();
        assert_eq!(back, f);
        assert!(decode_frame(&back).is_ok());
    }

    #[test]
    fn dropped_peer_reads_eof() {
        let (mut a, b) = LoopbackStream::pair();
        drop(b);
        let mut buf = [0u8; 4];
        assert_eq!(a.read(&mut buf).unwrap(), 0);
        assert!(a.write(&[1]).is_err());
    }

    #[test]
    fn closed_port_is_transport_error() {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = l.local_addr().unwrap().to_string();
        drop(l);
        assert!(matches!(tcp_connect(&addr), Err(TransportError::Connect { .. })));
    }

    #[test]
    fn loopback_listener_accepts() {
        let (mut l, c) = loopback();
        assert!(l.accept_timeout(Duration::from_millis(1)).unwrap().is_none());
        let mut conn = c.connect().unwrap();
        let mut srv = l.accept_timeout(Duration::from_millis(100)).unwrap().unwrap();
        conn.write_all(b"xy").unwrap();
        let mut buf = [0u8; 2];
        srv.read_exact(&mut buf).unwrap();
        assert_eq!(&buf, b"xy");
        drop(c);
        assert!(matches!(
            l.accept_timeout(Duration::from_millis(1)),
            Err(TransportError::ListenerGone)
        ));
    }
}
