use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use num_bigint::{BigInt, BigUint, RandBigInt};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use privdiag_core::fixedpoint::{quantize_model, CodecConfig};
use privdiag_core::metrics::CostCounters;
use privdiag_core::model::{Architecture, MlpModel};
use privdiag_core::paillier::arith::mod_pow;
use privdiag_core::paillier::Keypair;
use privdiag_core::protocol::encrypted_layer_forward;
use privdiag_core::protocol::wire::{decode_frame, encode_frame};
use privdiag_core::protocol::Message;

const KEY_BITS: [u64; 3] = [256, 512, 1024];

fn keypair(bits: u64) -> Keypair {
    Keypair::generate(bits, &mut ChaCha20Rng::seed_from_u64(bits)).expect("keygen")
}

/// Server-side weight exponent (8 bits) against the client's full-width nonce.
fn modpow(c: &mut Criterion) {
    let mut g = c.benchmark_group("modpow");
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    for bits in KEY_BITS {
        let kp = keypair(bits);
        let base = rng.gen_biguint_below(kp.n_sq());
        let small = BigUint::from(0x5au32);
        g.bench_with_input(BenchmarkId::new("weight_exponent", bits), &bits, |b, _| {
            b.iter(|| mod_pow(&base, &small, kp.n_sq()))
        });
        g.bench_with_input(BenchmarkId::new("nonce_exponent", bits), &bits, |b, _| {
            b.iter(|| mod_pow(&base, kp.n(), kp.n_sq()))
        });
    }
    g.finish();
}

fn encrypt_decrypt(c: &mut Criterion) {
    let mut g = c.benchmark_group("paillier");
    for bits in KEY_BITS {
        let kp = keypair(bits);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let ct = kp.encrypt(&BigUint::from(77u32), &mut rng).expect("encrypt");
        g.bench_with_input(BenchmarkId::new("encrypt", bits), &bits, |b, _| {
            b.iter(|| kp.encrypt(&BigUint::from(77u32), &mut rng).expect("encrypt"))
        });
        g.bench_with_input(BenchmarkId::new("decrypt", bits), &bits, |b, _| {
            b.iter(|| kp.decrypt(&ct).expect("decrypt"))
        });
        g.bench_with_input(BenchmarkId::new("decrypt_direct", bits), &bits, |b, _| {
            b.iter(|| kp.decrypt_direct(&ct).expect("decrypt"))
        });
    }
    g.finish();
}

fn layer_forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("layer_forward_64x16");
    g.sample_size(10);
    let arch = Architecture::parse("64-16-2", "sigmoid").expect("arch");
    let model = MlpModel::init(&arch, &mut ChaCha20Rng::seed_from_u64(3));
    for bits in KEY_BITS {
        let kp = keypair(bits);
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let q = quantize_model(&model, &CodecConfig::new(7, 8, bits).expect("codec")).expect("quantize");
        let ek = kp.evaluation_key(&mut rng);
        let inputs: Vec<_> = (0..64)
            .map(|i| kp.encrypt_signed(&BigInt::from(i), &mut rng).expect("encrypt"))
            .collect();
        g.bench_with_input(BenchmarkId::from_parameter(bits), &bits, |b, _| {
            b.iter(|| {
                let mut counters = CostCounters::default();
                encrypted_layer_forward(&ek, &q.layers[0], &inputs, &mut counters).expect("forward")
            })
        });
    }
    g.finish();
}

fn framing(c: &mut Criterion) {
    let kp = keypair(1024);
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let ciphertexts: Vec<_> = (0..128u32)
        .map(|i| kp.encrypt(&BigUint::from(i), &mut rng).expect("encrypt"))
        .collect();
    let msg = Message::ActReply { ciphertexts };
    let frame = encode_frame(&msg).expect("encode");
    let mut g = c.benchmark_group("framing_128x2048");
    g.bench_function("encode", |b| b.iter(|| encode_frame(&msg).expect("encode")));
    g.bench_function("decode", |b| b.iter(|| decode_frame(&frame).expect("decode")));
    g.finish();
}

criterion_group!(benches, modpow, encrypt_decrypt, layer_forward, framing);
criterion_main!(benches);
