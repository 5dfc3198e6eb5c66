use std::io::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::transport::{tcp_connect, tcp_listen, LoopbackStream};
use super::wire::read_frame;
use super::*;
use crate::fixedpoint::{quantize_model, CodecConfig, QuantizedModel};
use crate::metrics::predict_comm;
use crate::model::{forward_quantized, Architecture, MlpModel};

const KEY: u64 = 256;

fn model(sizes: &str, hidden: &str, seed: u64) -> MlpModel {
    let arch = Architecture::parse(sizes, hidden).unwrap();
    MlpModel::init(&arch, &mut ChaCha20Rng::seed_from_u64(seed))
}

fn quantized(m: &MlpModel, fl: u32) -> QuantizedModel {
    quantize_model(m, &CodecConfig::new(fl, 8, KEY).unwrap()).unwrap()
}

fn images(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..dim).map(|_| rng.gen::<f64>()).collect()).collect()
}

fn server(q: QuantizedModel, seed: u64) -> Arc<Server> {
    let cfg = ServerConfig {
        min_key_bits: KEY,
        seed: Some(seed),
        record: false,
    };
    Arc::new(Server::new(q, Credentials::single("alice", "pw"), cfg).unwrap())
}

fn client(seed: u64) -> Client {
    let mut cfg = ClientConfig::new("alice", "pw");
    cfg.key_bits = KEY;
    cfg.seed = Some(seed);
    Client::new(cfg).unwrap()
}

#[test]
fn encrypted_logits_equal_integer_oracle() {
    let m = model("16-8-4-2", "sigmoid,relu", 3);
    let q = quantized(&m, 7);
    let codec = q.codec(KEY);
    let (conn, handle) = spawn_loopback_server(server(q.clone(), 1));
    let xs = images(3, 16, 9);
    let out = client(2).classify(conn.connect().unwrap(), &xs).unwrap();
    drop(conn);
    for (o, x) in out.iter().zip(&xs) {
        let oracle = forward_quantized(&q, x, &codec).unwrap();
        assert_eq!(o.logits, oracle.logits());
        assert_eq!(o.label(), oracle.label());
        assert!((o.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let reports = handle.join().unwrap();
    assert_eq!(reports.len(), 1);
    assert!(reports[0].error.is_none());
    assert_eq!(reports[0].images.len(), 3);
}

#[test]
fn bad_password_rejected_with_zero_counters() {
    let m = model("16-4-2", "sigmoid", 1);
    let (conn, handle) = spawn_loopback_server(server(quantized(&m, 7), 1));
    let mut cfg = ClientConfig::new("alice", "wrong");
    cfg.key_bits = KEY;
    let err = Client::new(cfg)
        .unwrap()
        .diagnose(conn.connect().unwrap(), &[0.0; 16], &[0.0; 16])
        .unwrap_err();
    assert!(matches!(err.error, ProtocolError::Rejected(FailReason::BadCredentials)));
    assert!(err.partial.is_empty());
    drop(conn);
    let reports = handle.join().unwrap();
    assert!(!reports[0].authenticated);
    assert!(reports[0].total().is_zero());
}

#[test]
fn undersized_key_refused() {
    let m = model("16-4-2", "sigmoid", 1);
    let q = quantized(&m, 7);
    let srv = Arc::new(
        Server::new(
            q,
            Credentials::single("alice", "pw"),
            ServerConfig {
                min_key_bits: 512,
                seed: Some(1),
                record: false,
            },
        )
        .unwrap(),
    );
    let (conn, handle) = spawn_loopback_server(srv);
    let err = client(1).classify(conn.connect().unwrap(), &images(1, 16, 1)).unwrap_err();
    assert!(matches!(err.error, ProtocolError::Rejected(FailReason::KeyTooSmall)));
    drop(conn);
    assert!(handle.join().unwrap()[0].images.is_empty());
}

#[test]
fn out_of_order_message_ends_session() {
    let m = model("16-4-2", "sigmoid", 1);
    let (conn, handle) = spawn_loopback_server(server(quantized(&m, 7), 1));
    let mut io = FrameIo::new(conn.connect().unwrap(), false);
    io.send(&Message::Hello {
        uid: "alice".into(),
        pwd: "pw".into(),
    })
    .unwrap();
    assert_eq!(io.recv().unwrap().0, Message::HelloOk);
    io.send(&Message::ActReply { ciphertexts: vec![] }).unwrap();
    assert_eq!(io.recv().unwrap().0, Message::Close);
    drop(conn);
    let r = &handle.join().unwrap()[0];
    assert!(matches!(r.error, Some(ProtocolError::Unexpected { .. })));
}

#[test]
fn pixel_outside_unit_interval_never_leaves_client() {
    let m = model("16-4-2", "sigmoid", 1);
    let (conn, handle) = spawn_loopback_server(server(quantized(&m, 7), 1));
    let mut x = images(1, 16, 1).remove(0);
    x[5] = 1.5;
    let err = client(1).classify(conn.connect().unwrap(), &[x]).unwrap_err();
    assert!(matches!(err.error, ProtocolError::Input { index: 5, .. }));
    drop(conn);
    assert!(handle.join().unwrap()[0].images.is_empty());
}

#[test]
fn concurrent_sessions_are_isolated() {
    let m = model("16-6-2", "relu", 5);
    let q = quantized(&m, 7);
    let codec = q.codec(KEY);
    let (conn, handle) = spawn_loopback_server(server(q.clone(), 4));
    std::thread::scope(|s| {
        for t in 0..8u64 {
            let conn = conn.clone();
            let q = &q;
            s.spawn(move || {
                let xs = images(2, 16, 100 + t);
                let out = client(t).classify(conn.connect().unwrap(), &xs).unwrap();
                for (o, x) in out.iter().zip(&xs) {
                    assert_eq!(o.logits, forward_quantized(q, x, &codec).unwrap().logits());
                }
            });
        }
    });
    drop(conn);
    let reports = handle.join().unwrap();
    assert_eq!(reports.len(), 8);
    let mut ids: Vec<_> = reports.iter().map(|r| r.session_id).collect();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), 8);
    assert!(reports.iter().all(|r| r.error.is_none() && r.images.len() == 2));
}

#[test]
fn traffic_matches_closed_form_for_random_shapes() {
    let mut rng = ChaCha20Rng::seed_from_u64(77);
    for trial in 0..4 {
        let depth = rng.gen_range(1..=3);
        let mut sizes = vec![rng.gen_range(2..=12)];
        sizes.extend((0..depth).map(|_| rng.gen_range(1..=6)));
        sizes.push(2);
        let hidden = vec!["sigmoid"; sizes.len() - 2].join(",");
        let shape = sizes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("-");
        let m = model(&shape, &hidden, trial);
        let (conn, handle) = spawn_loopback_server(server(quantized(&m, 5), trial));
        let out = client(trial)
            .classify(conn.connect().unwrap(), &images(1, sizes[0], trial))
            .unwrap();
        drop(conn);
        handle.join().unwrap();
        let predicted = predict_comm(&sizes, KEY).unwrap();
        for (k, &(s2c, c2s)) in predicted.per_layer.iter().enumerate() {
            let c = &out[0].counters.0[k];
            assert_eq!((c.bigints_s2c, c.bigints_c2s), (s2c, c2s), "{shape} layer {k}");
        }
    }
}

/// Serves `hello_ok`, then answers `session_data` with `reply`.
fn fake_server(reply: Message) -> (Connection, std::thread::JoinHandle<()>) {
    let (a, b) = LoopbackStream::pair();
    let h = std::thread::spawn(move || {
        let mut io = FrameIo::new(Box::new(b), false);
        let _ = io.recv();
        let _ = io.send(&Message::HelloOk);
        let _ = io.recv();
        let _ = io.send(&reply);
        let _ = io.recv();
    });
    (Box::new(a), h)
}

#[test]
fn client_rejects_ciphertext_outside_group() {
    let reply = Message::ActQuery {
        activation: crate::model::Activation::Sigmoid,
        ciphertexts: vec![Ciphertext::from_raw(0u32.into())],
    };
    let (conn, h) = fake_server(reply);
    let err = client(1).classify(conn, &images(1, 4, 1)).unwrap_err();
    assert!(matches!(err.error, ProtocolError::Crypto(_)), "{:?}", err.error);
    h.join().unwrap();
}

#[test]
fn client_rejects_unexpected_message() {
    let (conn, h) = fake_server(Message::HelloOk);
    let err = client(1).classify(conn, &images(1, 4, 1)).unwrap_err();
    assert!(matches!(err.error, ProtocolError::Unexpected { .. }));
    h.join().unwrap();
}

/// Relays frames to `upstream` and hangs up after `limit` server frames.
fn cutting_proxy(upstream: Connection, limit: usize) -> (Connection, std::thread::JoinHandle<()>) {
    let (a, mut b) = LoopbackStream::pair();
    let h = std::thread::spawn(move || {
        let mut up = upstream;
        for _ in 0..limit {
            let Ok(f) = read_frame(&mut b) else { return };
            up.write_all(&f).unwrap();
            let Ok(f) = read_frame(&mut up) else { return };
            b.write_all(&f).unwrap();
        }
    });
    (Box::new(a), h)
}

#[test]
fn connection_loss_keeps_completed_images() {
    let m = model("16-5-3-2", "sigmoid,relu", 8);
    let (conn, handle) = spawn_loopback_server(server(quantized(&m, 7), 1));
    // hello_ok plus act_query, act_query, result for the first image.
    let (proxied, h) = cutting_proxy(conn.connect().unwrap(), 4);
    let xs = images(2, 16, 2);
    let err = client(3).diagnose(proxied, &xs[0], &xs[1]).unwrap_err();
    assert!(err.error.is_transport(), "{:?}", err.error);
    assert_eq!(err.partial.len(), 1);
    h.join().unwrap();
    drop(conn);
    let reports = handle.join().unwrap();
    assert!(reports[0].error.as_ref().is_some_and(ProtocolError::is_transport));
}

#[test]
fn tcp_session_and_identical_images() {
    let m = model("16-4-2", "sigmoid", 6);
    let srv = server(quantized(&m, 7), 1);
    let listener = tcp_listen("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let h = std::thread::spawn(move || {
        let stop = std::sync::atomic::AtomicBool::new(false);
        srv.serve(listener, &stop, Some(1), |_| {}).unwrap()
    });
    let x = images(1, 16, 4).remove(0);
    let dx = client(1).diagnose(tcp_connect(&addr).unwrap(), &x, &x).unwrap();
    assert_eq!(dx.ordering, Ordering::Indeterminate);
    assert_eq!(dx.first.logits, dx.second.logits);
    assert_ne!(dx.first.n, dx.second.n);
    assert_eq!(h.join().unwrap(), 1);
}
