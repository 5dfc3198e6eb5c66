//! Paillier cryptosystem: key generation, probabilistic encryption,
//! decryption, and the additive homomorphisms used for encrypted inference.
//!
//! Three key views exist:
//!
//! * [`Keypair`] holds everything (`p`, `q`, `n`, `g`, `λ`, `μ`) and stays on
//!   the client.
//! * [`PublicKey`] is `{n, n², g}`; it is what textbook encryption needs.
//! * [`EvaluationKey`] is `{n², ⟦1⟧}` and is the only material the server ever
//!   sees. It supports ciphertext addition, plaintext-scalar multiplication,
//!   plaintext addition and "keyless" encryption `⟦t⟧ = ⟦1⟧^t`.
//!
//! Signed plaintexts use the usual embedding: `v` and `v - n` are the same
//! residue, and values above `(n-1)/2` read back as negative.

pub mod arith;
pub mod prime;

use std::fmt;

use num_bigint::{BigInt, BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::{CryptoRng, RngCore};
use thiserror::Error;

use arith::{mod_inverse, mod_pow, mod_pow_signed};

pub use arith::{from_residue, to_residue};

/// Default modulus size for production sessions.
pub const DEFAULT_KEY_BITS: u64 = 1024;
/// Smallest modulus `keygen` accepts.
pub const MIN_KEY_BITS: u64 = 16;
/// Candidate draws per prime before giving up.
pub const PRIME_RETRY_CAP: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PaillierError {
    #[error("key size {0} bits is below the minimum of {MIN_KEY_BITS}")]
    KeySizeTooSmall(u64),
    #[error("no prime of {bits} bits found in {PRIME_RETRY_CAP} candidates")]
    PrimeSearchExhausted { bits: u64 },
    #[error("no valid prime pair for a {0}-bit modulus within the retry budget")]
    KeyPairExhausted(u64),
    #[error("invalid primes: {0}")]
    InvalidPrimes(&'static str),
    #[error("generator is not in Z*_{{n^2}} or yields no inverse mu")]
    BadGenerator,
    #[error("plaintext outside [0, n)")]
    PlaintextOutOfRange,
    #[error("signed operand does not satisfy |k| < n/2")]
    OperandOutOfRange,
    #[error("value is not a member of Z*_{{n^2}}")]
    NotInGroup,
}

/// How `g` is picked during key generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GeneratorChoice {
    /// `g = n + 1`, so `g^t = 1 + t·n (mod n²)`.
    #[default]
    NPlusOne,
    /// Uniform `g ∈ Z*_{n²}` for which `μ` exists.
    Random,
}

/// A Paillier ciphertext, a residue modulo `n²`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Ciphertext(BigUint);

impl Ciphertext {
    /// Wraps a raw residue. No group-membership check is performed; use
    /// [`PublicKey::check`] or [`EvaluationKey::check`] on untrusted input.
    pub fn from_raw(value: BigUint) -> Self {
        Ciphertext(value)
    }

    pub fn value(&self) -> &BigUint {
        &self.0
    }

    pub fn into_inner(self) -> BigUint {
        self.0
    }
}

impl fmt::Debug for Ciphertext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Ciphertext({:x})", self.0)
    }
}

/// `{n, n², g}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicKey {
    pub n: BigUint,
    pub n_sq: BigUint,
    pub g: BigUint,
}

impl PublicKey {
    pub fn bits(&self) -> u64 {
        self.n.bits()
    }

    /// `c ∈ Z*_{n²}`: `c < n²` and `gcd(c, n) = 1`.
    pub fn check(&self, c: &Ciphertext) -> Result<(), PaillierError> {
        if c.0 < self.n_sq && c.0.gcd(&self.n).is_one() {
            Ok(())
        } else {
            Err(PaillierError::NotInGroup)
        }
    }

    /// Draws `r` uniformly from `(0, n)` with `gcd(r, n) = 1`.
    pub fn random_nonce<R: RngCore + CryptoRng>(&self, rng: &mut R) -> BigUint {
        let one = BigUint::one();
        loop {
            let r = rng.gen_biguint_range(&one, &self.n);
            if r.gcd(&self.n).is_one() {
                return r;
            }
        }
    }

    /// `g^t · r^n mod n²` for a fresh nonce.
    pub fn encrypt<R: RngCore + CryptoRng>(
        &self,
        t: &BigUint,
        rng: &mut R,
    ) -> Result<Ciphertext, PaillierError> {
        let r = self.random_nonce(rng);
        self.encrypt_with_nonce(t, &r)
    }

    /// Deterministic encryption with caller-supplied `r`.
    pub fn encrypt_with_nonce(&self, t: &BigUint, r: &BigUint) -> Result<Ciphertext, PaillierError> {
        if t >= &self.n {
            return Err(PaillierError::PlaintextOutOfRange);
        }
        if r.is_zero() || r >= &self.n || !r.gcd(&self.n).is_one() {
            return Err(PaillierError::NotInGroup);
        }
        let gt = self.g_pow(t);
        let rn = mod_pow(r, &self.n, &self.n_sq);
        Ok(Ciphertext(gt * rn % &self.n_sq))
    }

    fn g_pow(&self, t: &BigUint) -> BigUint {
        if self.g == &self.n + 1u32 {
            (BigUint::one() + t * &self.n) % &self.n_sq
        } else {
            mod_pow(&self.g, t, &self.n_sq)
        }
    }
}

/// Server-side evaluation material: `n²` and `⟦1⟧`. Carries no `g`, `λ`, `μ`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvaluationKey {
    n_sq: BigUint,
    enc_one: Ciphertext,
}

impl EvaluationKey {
    /// Validates that `enc_one ∈ Z*_{n²}`.
    pub fn new(n_sq: BigUint, enc_one: Ciphertext) -> Result<Self, PaillierError> {
        if n_sq <= BigUint::one() {
            return Err(PaillierError::NotInGroup);
        }
        let ek = EvaluationKey { n_sq, enc_one };
        ek.check(&ek.enc_one)?;
        Ok(ek)
    }

    pub fn n_sq(&self) -> &BigUint {
        &self.n_sq
    }

    pub fn enc_one(&self) -> &Ciphertext {
        &self.enc_one
    }

    /// Approximate modulus width, `bits(n²) / 2` rounded up.
    pub fn modulus_bits(&self) -> u64 {
        self.n_sq.bits().div_ceil(2)
    }

    /// `c < n²` and `gcd(c, n²) = 1`, equivalent to membership in `Z*_{n²}`.
    pub fn check(&self, c: &Ciphertext) -> Result<(), PaillierError> {
        if c.0 < self.n_sq && c.0.gcd(&self.n_sq).is_one() {
            Ok(())
        } else {
            Err(PaillierError::NotInGroup)
        }
    }

    fn check_operand(&self, k: &BigInt) -> Result<(), PaillierError> {
        // |k| < n/2  <=>  (2k)^2 < n^2
        let twice = k.magnitude() << 1u32;
        if &twice * &twice < self.n_sq {
            Ok(())
        } else {
            Err(PaillierError::OperandOutOfRange)
        }
    }

    /// `⟦a⟧ · ⟦b⟧ mod n²`, decrypting to `a + b`.
    pub fn add(&self, c1: &Ciphertext, c2: &Ciphertext) -> Ciphertext {
        Ciphertext(&c1.0 * &c2.0 % &self.n_sq)
    }

    /// `⟦a⟧^k mod n²` (inverse first when `k < 0`), decrypting to `a·k`.
    pub fn scalar_mul(&self, c: &Ciphertext, k: &BigInt) -> Result<Ciphertext, PaillierError> {
        self.check_operand(k)?;
        mod_pow_signed(&c.0, k, &self.n_sq)
            .map(Ciphertext)
            .ok_or(PaillierError::NotInGroup)
    }

    /// `⟦a⟧^{-1} mod n²`, decrypting to `-a`.
    pub fn negate(&self, c: &Ciphertext) -> Result<Ciphertext, PaillierError> {
        mod_inverse(&c.0, &self.n_sq)
            .map(Ciphertext)
            .ok_or(PaillierError::NotInGroup)
    }

    /// `⟦a⟧ · ⟦1⟧^t mod n²`, decrypting to `a + t`.
    pub fn add_plain(&self, c: &Ciphertext, t: &BigInt) -> Result<Ciphertext, PaillierError> {
        let enc_t = self.encrypt_keyless(t)?;
        Ok(self.add(c, &enc_t))
    }

    /// `⟦1⟧^t mod n²`. Deterministic: every call with the same `t` yields the
    /// same ciphertext.
    pub fn encrypt_keyless(&self, t: &BigInt) -> Result<Ciphertext, PaillierError> {
        self.scalar_mul(&self.enc_one, t)
    }
}

/// CRT material for the key owner's fast paths.
#[derive(Clone)]
struct CrtParams {
    p_sq: BigUint,
    q_sq: BigUint,
    /// `(p²)^{-1} mod q²`
    p_sq_inv_q_sq: BigUint,
    /// `n mod p(p-1)`, `n mod q(q-1)`
    n_mod_phi_p_sq: BigUint,
    n_mod_phi_q_sq: BigUint,
    /// `L_p(g^{p-1} mod p²)^{-1} mod p` and the `q` analogue
    h_p: BigUint,
    h_q: BigUint,
    /// `p^{-1} mod q`
    p_inv_q: BigUint,
}

/// Full key material: `p`, `q`, `n = pq`, `n²`, `g`, `λ = lcm(p-1, q-1)`,
/// `μ = L(g^λ mod n²)^{-1} mod n`.
#[derive(Clone)]
pub struct Keypair {
    p: BigUint,
    q: BigUint,
    public: PublicKey,
    lambda: BigUint,
    mu: BigUint,
    crt: CrtParams,
}

impl fmt::Debug for Keypair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Keypair")
            .field("n_bits", &self.public.n.bits())
            .finish_non_exhaustive()
    }
}

/// `L(x) = (x - 1) div n`.
pub fn l_function(x: &BigUint, n: &BigUint) -> BigUint {
    (x - 1u32) / n
}

impl Keypair {
    /// Generates a keypair whose modulus has exactly `bits` bits, with
    /// `g = n + 1`.
    pub fn generate<R: RngCore + CryptoRng>(bits: u64, rng: &mut R) -> Result<Self, PaillierError> {
        Self::generate_with(bits, GeneratorChoice::NPlusOne, rng)
    }

    pub fn generate_with<R: RngCore + CryptoRng>(
        bits: u64,
        generator: GeneratorChoice,
        rng: &mut R,
    ) -> Result<Self, PaillierError> {
        if bits < MIN_KEY_BITS {
            return Err(PaillierError::KeySizeTooSmall(bits));
        }
        let p_bits = bits.div_ceil(2);
        let q_bits = bits / 2;
        // Distinct-prime and gcd failures are rare; bound the outer loop too.
        for _ in 0..PRIME_RETRY_CAP {
            let p = prime::random_prime(p_bits, PRIME_RETRY_CAP, rng)
                .ok_or(PaillierError::PrimeSearchExhausted { bits: p_bits })?;
            let q = prime::random_prime(q_bits, PRIME_RETRY_CAP, rng)
                .ok_or(PaillierError::PrimeSearchExhausted { bits: q_bits })?;
            if p == q {
                continue;
            }
            let g = match generator {
                GeneratorChoice::NPlusOne => None,
                GeneratorChoice::Random => {
                    let n = &p * &q;
                    let n_sq = &n * &n;
                    Some(random_generator(&n, &n_sq, &p, &q, rng))
                }
            };
            match Self::from_primes(p, q, g) {
                Ok(kp) => {
                    debug_assert_eq!(kp.public.n.bits(), bits);
                    return Ok(kp);
                }
                Err(PaillierError::InvalidPrimes(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        Err(PaillierError::KeyPairExhausted(bits))
    }

    /// Builds a keypair from given primes. `g` defaults to `n + 1`.
    /// Primality of `p` and `q` is the caller's responsibility.
    pub fn from_primes(p: BigUint, q: BigUint, g: Option<BigUint>) -> Result<Self, PaillierError> {
        if p == q {
            return Err(PaillierError::InvalidPrimes("p and q must differ"));
        }
        if p < BigUint::from(2u32) || q < BigUint::from(2u32) {
            return Err(PaillierError::InvalidPrimes("primes must be at least 2"));
        }
        let one = BigUint::one();
        let n = &p * &q;
        let p1 = &p - &one;
        let q1 = &q - &one;
        if !n.gcd(&(&p1 * &q1)).is_one() {
            return Err(PaillierError::InvalidPrimes("gcd(pq, (p-1)(q-1)) != 1"));
        }
        let n_sq = &n * &n;
        let g = g.unwrap_or_else(|| &n + &one);
        if g >= n_sq || !g.gcd(&n).is_one() {
            return Err(PaillierError::BadGenerator);
        }
        let lambda = p1.lcm(&q1);
        let u = mod_pow(&g, &lambda, &n_sq);
        let mu = mod_inverse(&l_function(&u, &n), &n).ok_or(PaillierError::BadGenerator)?;

        let p_sq = &p * &p;
        let q_sq = &q * &q;
        let crt = CrtParams {
            p_sq_inv_q_sq: mod_inverse(&p_sq, &q_sq).ok_or(PaillierError::InvalidPrimes("p² not invertible mod q²"))?,
            n_mod_phi_p_sq: &n % (&p_sq - &p),
            n_mod_phi_q_sq: &n % (&q_sq - &q),
            h_p: mod_inverse(&l_function(&mod_pow(&g, &p1, &p_sq), &p), &p)
                .ok_or(PaillierError::BadGenerator)?,
            h_q: mod_inverse(&l_function(&mod_pow(&g, &q1, &q_sq), &q), &q)
                .ok_or(PaillierError::BadGenerator)?,
            p_inv_q: mod_inverse(&p, &q).ok_or(PaillierError::InvalidPrimes("p not invertible mod q"))?,
            p_sq,
            q_sq,
        };
        Ok(Keypair {
            p,
            q,
            public: PublicKey { n, n_sq, g },
            lambda,
            mu,
            crt,
        })
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.public
    }

    pub fn n(&self) -> &BigUint {
        &self.public.n
    }

    pub fn n_sq(&self) -> &BigUint {
        &self.public.n_sq
    }

    pub fn g(&self) -> &BigUint {
        &self.public.g
    }

    pub fn p(&self) -> &BigUint {
        &self.p
    }

    pub fn q(&self) -> &BigUint {
        &self.q
    }

    pub fn lambda(&self) -> &BigUint {
        &self.lambda
    }

    pub fn mu(&self) -> &BigUint {
        &self.mu
    }

    pub fn bits(&self) -> u64 {
        self.public.n.bits()
    }

    /// Fresh `⟦1⟧` packaged with `n²` for the server.
    pub fn evaluation_key<R: RngCore + CryptoRng>(&self, rng: &mut R) -> EvaluationKey {
        let enc_one = self
            .encrypt(&BigUint::one(), rng)
            .expect("1 < n for any valid modulus");
        EvaluationKey {
            n_sq: self.public.n_sq.clone(),
            enc_one,
        }
    }

    /// Same ciphertext as [`PublicKey::encrypt_with_nonce`], but computes
    /// `r^n` modulo `p²` and `q²` separately.
    pub fn encrypt_with_nonce(&self, t: &BigUint, r: &BigUint) -> Result<Ciphertext, PaillierError> {
        let pk = &self.public;
        if t >= &pk.n {
            return Err(PaillierError::PlaintextOutOfRange);
        }
        if r.is_zero() || r >= &pk.n || !r.gcd(&pk.n).is_one() {
            return Err(PaillierError::NotInGroup);
        }
        let crt = &self.crt;
        let rp = mod_pow(&(r % &crt.p_sq), &crt.n_mod_phi_p_sq, &crt.p_sq);
        let rq = mod_pow(&(r % &crt.q_sq), &crt.n_mod_phi_q_sq, &crt.q_sq);
        let rn = crt_combine(&rp, &rq, &crt.p_sq, &crt.q_sq, &crt.p_sq_inv_q_sq);
        Ok(Ciphertext(pk.g_pow(t) * rn % &pk.n_sq))
    }

    pub fn encrypt<R: RngCore + CryptoRng>(
        &self,
        t: &BigUint,
        rng: &mut R,
    ) -> Result<Ciphertext, PaillierError> {
        let r = self.public.random_nonce(rng);
        self.encrypt_with_nonce(t, &r)
    }

    /// Encrypts a signed value through the residue embedding.
    pub fn encrypt_signed<R: RngCore + CryptoRng>(
        &self,
        v: &BigInt,
        rng: &mut R,
    ) -> Result<Ciphertext, PaillierError> {
        if !arith::fits_signed(v, &self.public.n) {
            return Err(PaillierError::OperandOutOfRange);
        }
        self.encrypt(&to_residue(v, &self.public.n), rng)
    }

    /// `L(c^λ mod n²) · μ mod n`, computed directly with the full modulus.
    pub fn decrypt_direct(&self, c: &Ciphertext) -> Result<BigUint, PaillierError> {
        self.public.check(c)?;
        let n = &self.public.n;
        let u = mod_pow(&c.0, &self.lambda, &self.public.n_sq);
        Ok(l_function(&u, n) * &self.mu % n)
    }

    /// CRT decryption; agrees with [`Keypair::decrypt_direct`].
    pub fn decrypt(&self, c: &Ciphertext) -> Result<BigUint, PaillierError> {
        self.public.check(c)?;
        let crt = &self.crt;
        let one = BigUint::one();
        let mp = l_function(&mod_pow(&(&c.0 % &crt.p_sq), &(&self.p - &one), &crt.p_sq), &self.p)
            * &crt.h_p
            % &self.p;
        let mq = l_function(&mod_pow(&(&c.0 % &crt.q_sq), &(&self.q - &one), &crt.q_sq), &self.q)
            * &crt.h_q
            % &self.q;
        Ok(crt_combine(&mp, &mq, &self.p, &self.q, &crt.p_inv_q))
    }

    /// Decrypts and applies the signed reading.
    pub fn decrypt_signed(&self, c: &Ciphertext) -> Result<BigInt, PaillierError> {
        Ok(from_residue(&self.decrypt(c)?, &self.public.n))
    }
}

/// `x ≡ a (mod m1)`, `x ≡ b (mod m2)`, given `m1^{-1} mod m2`.
fn crt_combine(a: &BigUint, b: &BigUint, m1: &BigUint, m2: &BigUint, m1_inv: &BigUint) -> BigUint {
    let a_mod = a % m2;
    let diff = if b >= &a_mod { b - &a_mod } else { b + m2 - &a_mod };
    a + m1 * (diff * m1_inv % m2)
}

fn random_generator<R: RngCore + CryptoRng>(
    n: &BigUint,
    n_sq: &BigUint,
    p: &BigUint,
    q: &BigUint,
    rng: &mut R,
) -> BigUint {
    let one = BigUint::one();
    let lambda = (p - &one).lcm(&(q - &one));
    loop {
        let g = rng.gen_biguint_range(&one, n_sq);
        if !g.gcd(n).is_one() {
            continue;
        }
        let u = mod_pow(&g, &lambda, n_sq);
        if mod_inverse(&l_function(&u, n), n).is_some() {
            return g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn toy() -> Keypair {
        Keypair::from_primes(5u32.into(), 7u32.into(), Some(36u32.into())).unwrap()
    }

    fn toy_ek() -> EvaluationKey {
        // ⟦1⟧ with r = 3
        let enc_one = toy().encrypt_with_nonce(&BigUint::one(), &3u32.into()).unwrap();
        EvaluationKey::new(1225u32.into(), enc_one).unwrap()
    }

    #[test]
    fn toy_key_parameters() {
        let kp = toy();
        assert_eq!(kp.n(), &BigUint::from(35u32));
        assert_eq!(kp.lambda(), &BigUint::from(12u32));
        assert_eq!(kp.mu(), &BigUint::from(3u32));
    }

    #[test]
    fn toy_encrypt_decrypt() {
        let kp = toy();
        let c = kp.public_key().encrypt_with_nonce(&7u32.into(), &4u32.into()).unwrap();
        assert_eq!(c.value(), &BigUint::from(79u32));
        assert_eq!(kp.encrypt_with_nonce(&7u32.into(), &4u32.into()).unwrap(), c);
        assert_eq!(kp.decrypt(&c).unwrap(), BigUint::from(7u32));
        assert_eq!(kp.decrypt_direct(&c).unwrap(), BigUint::from(7u32));
        assert_eq!(kp.decrypt(&Ciphertext::from_raw(BigUint::one())).unwrap(), BigUint::zero());
    }

    #[test]
    fn toy_homomorphisms() {
        let kp = toy();
        let ek = toy_ek();
        let c7 = Ciphertext::from_raw(79u32.into());
        let c11 = kp.public_key().encrypt_with_nonce(&11u32.into(), &2u32.into()).unwrap();
        assert_eq!(kp.decrypt(&ek.add(&c7, &c11)).unwrap(), BigUint::from(18u32));

        let c21 = ek.scalar_mul(&c7, &BigInt::from(3)).unwrap();
        assert_eq!(c21.value(), &BigUint::from(589u32));
        assert_eq!(kp.decrypt(&c21).unwrap(), BigUint::from(21u32));

        let neg = ek.scalar_mul(&c7, &BigInt::from(-1)).unwrap();
        assert_eq!(kp.decrypt(&neg).unwrap(), BigUint::from(28u32));
        assert_eq!(ek.negate(&c7).unwrap(), neg);

        let plus5 = ek.add_plain(&c7, &BigInt::from(5)).unwrap();
        assert_eq!(kp.decrypt(&plus5).unwrap(), BigUint::from(12u32));
        let minus7 = ek.add_plain(&c7, &BigInt::from(-7)).unwrap();
        assert_eq!(kp.decrypt(&minus7).unwrap(), BigUint::zero());

        let b = ek.encrypt_keyless(&BigInt::from(-3)).unwrap();
        assert_eq!(kp.decrypt(&b).unwrap(), BigUint::from(32u32));
        assert_eq!(ek.encrypt_keyless(&BigInt::from(1)).unwrap(), *ek.enc_one());
        assert_eq!(ek.encrypt_keyless(&BigInt::zero()).unwrap().value(), &BigUint::one());
    }

    #[test]
    fn operand_range_enforced() {
        let ek = toy_ek();
        let c7 = Ciphertext::from_raw(79u32.into());
        assert!(ek.scalar_mul(&c7, &BigInt::from(17)).is_ok());
        assert_eq!(ek.scalar_mul(&c7, &BigInt::from(18)), Err(PaillierError::OperandOutOfRange));
        assert_eq!(ek.encrypt_keyless(&BigInt::from(-18)), Err(PaillierError::OperandOutOfRange));
    }

    #[test]
    fn rejects_out_of_group_values() {
        let kp = toy();
        assert_eq!(kp.decrypt(&Ciphertext::from_raw(35u32.into())), Err(PaillierError::NotInGroup));
        assert_eq!(kp.decrypt(&Ciphertext::from_raw(1225u32.into())), Err(PaillierError::NotInGroup));
        assert_eq!(
            kp.public_key().encrypt_with_nonce(&35u32.into(), &4u32.into()),
            Err(PaillierError::PlaintextOutOfRange)
        );
        assert!(EvaluationKey::new(1225u32.into(), Ciphertext::from_raw(0u32.into())).is_err());
    }

    #[test]
    fn equal_primes_rejected() {
        assert!(matches!(
            Keypair::from_primes(7u32.into(), 7u32.into(), None),
            Err(PaillierError::InvalidPrimes(_))
        ));
    }

    #[test]
    fn keygen_sizes_and_invariants() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        assert_eq!(Keypair::generate(15, &mut rng).unwrap_err(), PaillierError::KeySizeTooSmall(15));
        for bits in [16u64, 33, 128, 256] {
            let kp = Keypair::generate(bits, &mut rng).unwrap();
            assert_eq!(kp.n().bits(), bits);
            assert_ne!(kp.p(), kp.q());
            let phi = (kp.p() - 1u32) * (kp.q() - 1u32);
            assert!(kp.n().gcd(&phi).is_one());
            let u = mod_pow(kp.g(), kp.lambda(), kp.n_sq());
            assert!((l_function(&u, kp.n()) * kp.mu() % kp.n()).is_one());
        }
    }

    #[test]
    fn random_generator_mode_round_trips() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let kp = Keypair::generate_with(128, GeneratorChoice::Random, &mut rng).unwrap();
        assert_ne!(kp.g(), &(kp.n() + 1u32));
        for t in [0u32, 1, 12345, 999_999] {
            let c = kp.public_key().encrypt(&t.into(), &mut rng).unwrap();
            assert_eq!(kp.decrypt(&c).unwrap(), BigUint::from(t));
            assert_eq!(kp.decrypt_direct(&c).unwrap(), BigUint::from(t));
        }
    }

    #[test]
    fn crt_paths_match_textbook() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let kp = Keypair::generate(256, &mut rng).unwrap();
        for _ in 0..50 {
            let t = rng.gen_biguint_below(kp.n());
            let r = kp.public_key().random_nonce(&mut rng);
            let c = kp.public_key().encrypt_with_nonce(&t, &r).unwrap();
            assert_eq!(kp.encrypt_with_nonce(&t, &r).unwrap(), c);
            assert_eq!(kp.decrypt(&c).unwrap(), t);
            assert_eq!(kp.decrypt_direct(&c).unwrap(), t);
        }
    }

    #[test]
    fn encryption_is_probabilistic() {
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        let kp = Keypair::generate(128, &mut rng).unwrap();
        let t = BigUint::from(7u32);
        let a = kp.encrypt(&t, &mut rng).unwrap();
        let b = kp.encrypt(&t, &mut rng).unwrap();
        assert_ne!(a, b);
        assert_eq!(kp.decrypt(&a).unwrap(), kp.decrypt(&b).unwrap());
    }
}
