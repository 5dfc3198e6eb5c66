//! Modular arithmetic helpers over `BigUint`/`BigInt`.

use num_bigint::{BigInt, BigUint, Sign};
use num_integer::Integer;
use num_traits::{One, Signed, Zero};

/// Exponents at or below this many bits go through the plain binary ladder.
/// Larger ones use the Montgomery window from `num-bigint`, which amortises its
/// setup cost only for long exponents.
const LADDER_MAX_BITS: u64 = 64;

/// `base^exp mod modulus`, reducing after every square and every multiply.
pub fn mod_pow(base: &BigUint, exp: &BigUint, modulus: &BigUint) -> BigUint {
    assert!(!modulus.is_zero(), "mod_pow with zero modulus");
    if modulus.is_one() {
        return BigUint::zero();
    }
    if exp.bits() > LADDER_MAX_BITS {
        return base.modpow(exp, modulus);
    }
    square_and_multiply(base, exp, modulus)
}

/// Left-to-right binary exponentiation.
pub fn square_and_multiply(base: &BigUint, exp: &BigUint, modulus: &BigUint) -> BigUint {
    let base = base % modulus;
    let mut acc = BigUint::one() % modulus;
    for i in (0..exp.bits()).rev() {
        acc = &acc * &acc % modulus;
        if exp.bit(i) {
            acc = &acc * &base % modulus;
        }
    }
    acc
}

/// Multiplicative inverse of `a` modulo `m`, if it exists.
pub fn mod_inverse(a: &BigUint, m: &BigUint) -> Option<BigUint> {
    if m.is_zero() {
        return None;
    }
    let a = BigInt::from(a % m);
    let m_signed = BigInt::from(m.clone());
    let ext = a.extended_gcd(&m_signed);
    if !ext.gcd.is_one() {
        return None;
    }
    let x = ext.x.mod_floor(&m_signed);
    x.to_biguint()
}

/// `base^exp mod modulus` for a signed exponent; negative exponents go through
/// the modular inverse of the base.
pub fn mod_pow_signed(base: &BigUint, exp: &BigInt, modulus: &BigUint) -> Option<BigUint> {
    let magnitude = exp.magnitude();
    match exp.sign() {
        Sign::Minus => {
            let inv = mod_inverse(base, modulus)?;
            Some(mod_pow(&inv, magnitude, modulus))
        }
        _ => Some(mod_pow(base, magnitude, modulus)),
    }
}

/// Maps a signed integer into `[0, n)`.
pub fn to_residue(v: &BigInt, n: &BigUint) -> BigUint {
    let n_signed = BigInt::from(n.clone());
    v.mod_floor(&n_signed)
        .to_biguint()
        .expect("mod_floor with positive modulus is non-negative")
}

/// Signed reading of a residue: values above `(n-1)/2` are negative.
pub fn from_residue(v: &BigUint, n: &BigUint) -> BigInt {
    let half = (n - 1u32) >> 1;
    if v > &half {
        BigInt::from(v.clone()) - BigInt::from(n.clone())
    } else {
        BigInt::from(v.clone())
    }
}

/// True when `|v| < n/2`, i.e. `v` is representable in the signed embedding.
pub fn fits_signed(v: &BigInt, n: &BigUint) -> bool {
    // |v| < n/2  <=>  2|v| < n
    (v.abs().magnitude() << 1u32) < *n
}

pub fn lcm(a: &BigUint, b: &BigUint) -> BigUint {
    a.lcm(b)
}

pub fn gcd(a: &BigUint, b: &BigUint) -> BigUint {
    a.gcd(b)
}
