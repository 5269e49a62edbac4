//! Wrapping arithmetic over `Z_{2^(l+s)}`.
//!
//! The low `l` bits carry the values the protocols are correct for; the top
//! `s` bits are slack for the MAC algebra. Elements always carry their ring
//! parameters so that mixing rings is caught instead of silently truncated.

use std::fmt;
use std::ops::{Add, AddAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Serialized width of one ring element on tapes and wire frames.
pub const ELEMENT_BYTES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RingParams {
    l: u8,
    s: u8,
}

impl RingParams {
    /// `l = s = 64`, the deployment setting.
    pub const DEFAULT: RingParams = RingParams { l: 64, s: 64 };

    pub fn new(l: u32, s: u32) -> Result<Self> {
        if l < 2 {
            return Err(Error::config(format!("l must be at least 2, got {l}")));
        }
        if s < 1 {
            return Err(Error::config(format!("s must be at least 1, got {s}")));
        }
        if l + s > 128 {
            return Err(Error::config(format!("l + s must not exceed 128, got {}", l + s)));
        }
        Ok(RingParams { l: l as u8, s: s as u8 })
    }

    pub fn l(&self) -> u32 {
        self.l as u32
    }

    pub fn s(&self) -> u32 {
        self.s as u32
    }

    /// Total ring width `l + s`.
    pub fn bits(&self) -> u32 {
        self.l as u32 + self.s as u32
    }

    pub fn mask(&self) -> u128 {
        low_mask(self.bits())
    }

    /// Reduces `value` into the ring.
    pub fn element(&self, value: u128) -> RingElement {
        RingElement { value: value & self.mask(), params: *self }
    }

    /// Two's-complement embedding of a signed integer.
    pub fn from_signed(&self, value: i128) -> RingElement {
        self.element(value as u128)
    }

    pub fn zero(&self) -> RingElement {
        self.element(0)
    }

    pub fn one(&self) -> RingElement {
        self.element(1)
    }

    pub fn zeros(&self, len: usize) -> Vec<RingElement> {
        vec![self.zero(); len]
    }

    /// `2^l` as a ring element.
    pub fn two_pow_l(&self) -> RingElement {
        self.element(1u128 << self.l)
    }

    pub fn decode_element(&self, bytes: &[u8]) -> Result<RingElement> {
        let raw: [u8; ELEMENT_BYTES] = bytes
            .get(..ELEMENT_BYTES)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| Error::Decode("truncated ring element".into()))?;
        let value = u128::from_le_bytes(raw);
        if value & !self.mask() != 0 {
            return Err(Error::Decode(format!(
                "residue exceeds 2^{} ring",
                self.bits()
            )));
        }
        Ok(RingElement { value, params: *self })
    }

    pub fn decode_elements(&self, bytes: &[u8]) -> Result<Vec<RingElement>> {
        if !bytes.len().is_multiple_of(ELEMENT_BYTES) {
            return Err(Error::Decode(format!(
                "element buffer length {} is not a multiple of {ELEMENT_BYTES}",
                bytes.len()
            )));
        }
        bytes.chunks_exact(ELEMENT_BYTES).map(|c| self.decode_element(c)).collect()
    }
}

impl Default for RingParams {
    fn default() -> Self {
        RingParams::DEFAULT
    }
}

impl fmt::Display for RingParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Z_2^({}+{})", self.l, self.s)
    }
}

fn low_mask(bits: u32) -> u128 {
    if bits >= 128 {
        u128::MAX
    } else {
        (1u128 << bits) - 1
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct RingElement {
    value: u128,
    params: RingParams,
}

impl RingElement {
    pub fn value(&self) -> u128 {
        self.value
    }

    pub fn params(&self) -> RingParams {
        self.params
    }

    pub fn is_zero(&self) -> bool {
        self.value == 0
    }

    pub fn try_add(self, rhs: RingElement) -> Result<RingElement> {
        self.check(&rhs)?;
        Ok(self + rhs)
    }

    pub fn try_sub(self, rhs: RingElement) -> Result<RingElement> {
        self.check(&rhs)?;
        Ok(self - rhs)
    }

    pub fn try_mul(self, rhs: RingElement) -> Result<RingElement> {
        self.check(&rhs)?;
        Ok(self * rhs)
    }

    fn check(&self, rhs: &RingElement) -> Result<()> {
        if self.params != rhs.params {
            return Err(Error::ParamMismatch);
        }
        Ok(())
    }

    /// Reduces mod `2^l` and reads the result as a two's-complement integer
    /// in `[-2^(l-1), 2^(l-1))`.
    pub fn to_signed_l(&self) -> i128 {
        let shift = 128 - self.params.l();
        ((self.value << shift) as i128) >> shift
    }

    /// Full-ring signed reading in `[-2^(l+s-1), 2^(l+s-1))`.
    pub fn to_signed(&self) -> i128 {
        let shift = 128 - self.params.bits();
        ((self.value << shift) as i128) >> shift
    }

    pub fn to_le_bytes(&self) -> [u8; ELEMENT_BYTES] {
        self.value.to_le_bytes()
    }

    /// Conditional negation, `(-1)^negate * self`.
    pub fn negate_if(self, negate: bool) -> RingElement {
        if negate {
            -self
        } else {
            self
        }
    }
}

impl fmt::Debug for RingElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value)
    }
}

impl fmt::Display for RingElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value)
    }
}

impl Add for RingElement {
    type Output = RingElement;

    fn add(self, rhs: RingElement) -> RingElement {
        debug_assert_eq!(self.params, rhs.params, "ring parameter mismatch");
        self.params.element(self.value.wrapping_add(rhs.value))
    }
}

impl Sub for RingElement {
    type Output = RingElement;

    fn sub(self, rhs: RingElement) -> RingElement {
        debug_assert_eq!(self.params, rhs.params, "ring parameter mismatch");
        self.params.element(self.value.wrapping_sub(rhs.value))
    }
}

impl Mul for RingElement {
    type Output = RingElement;

    fn mul(self, rhs: RingElement) -> RingElement {
        debug_assert_eq!(self.params, rhs.params, "ring parameter mismatch");
        // wrapping_mul is exact mod 2^128, and 2^(l+s) divides 2^128
        self.params.element(self.value.wrapping_mul(rhs.value))
    }
}

impl Neg for RingElement {
    type Output = RingElement;

    fn neg(self) -> RingElement {
        self.params.element(self.value.wrapping_neg())
    }
}

impl AddAssign for RingElement {
    fn add_assign(&mut self, rhs: RingElement) {
        *self = *self + rhs;
    }
}

impl SubAssign for RingElement {
    fn sub_assign(&mut self, rhs: RingElement) {
        *self = *self - rhs;
    }
}

impl MulAssign for RingElement {
    fn mul_assign(&mut self, rhs: RingElement) {
        *self = *self * rhs;
    }
}

impl std::iter::Sum for RingElement {
    fn sum<I: Iterator<Item = RingElement>>(mut iter: I) -> RingElement {
        let first = iter.next().expect("sum of an empty ring-element iterator has no ring");
        iter.fold(first, |acc, x| acc + x)
    }
}

pub fn add(a: RingElement, b: RingElement) -> Result<RingElement> {
    a.try_add(b)
}

pub fn mul(a: RingElement, b: RingElement) -> Result<RingElement> {
    a.try_mul(b)
}

pub fn to_signed_l(a: RingElement) -> i128 {
    a.to_signed_l()
}

pub fn sample_uniform(rng: &mut SeededRng, params: RingParams) -> RingElement {
    params.element(rng.next_u128())
}

pub fn encode_elements(values: &[RingElement]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * ELEMENT_BYTES);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Fixed-point codec with a symmetric scale of `2^scale_bits`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FixedCodec {
    pub scale_bits: u32,
}

impl Default for FixedCodec {
    fn default() -> Self {
        FixedCodec { scale_bits: 7 }
    }
}

impl FixedCodec {
    pub fn new(scale_bits: u32) -> Self {
        FixedCodec { scale_bits }
    }

    pub fn scale(&self) -> f64 {
        (self.scale_bits as f64).exp2()
    }

    pub fn quantize(&self, q: f64) -> i128 {
        (q * self.scale()).round() as i128
    }

    pub fn encode(&self, q: f64, params: RingParams) -> RingElement {
        params.from_signed(self.quantize(q))
    }

    pub fn decode(&self, e: RingElement) -> f64 {
        e.to_signed_l() as f64 / self.scale()
    }
}

/// Deterministic ChaCha20 stream addressed by a 32-byte seed and a position.
///
/// `counter` counts 32-bit words consumed, so a stream can be resumed at any
/// earlier draw.
#[derive(Clone)]
pub struct SeededRng {
    seed: [u8; 32],
    inner: ChaCha20Rng,
}

impl SeededRng {
    pub fn new(seed: [u8; 32]) -> Self {
        SeededRng { seed, inner: ChaCha20Rng::from_seed(seed) }
    }

    pub fn from_u64(seed: u64) -> Self {
        let mut bytes = [0u8; 32];
        bytes[..8].copy_from_slice(&seed.to_le_bytes());
        SeededRng::new(bytes)
    }

    pub fn with_counter(seed: [u8; 32], counter: u128) -> Self {
        let mut rng = SeededRng::new(seed);
        rng.inner.set_word_pos(counter);
        rng
    }

    /// Independent child stream bound to `label`.
    pub fn derive(&self, label: &str) -> SeededRng {
        let mut h = Sha256::new();
        h.update(self.seed);
        h.update(label.as_bytes());
        SeededRng::new(h.finalize().into())
    }

    pub fn seed(&self) -> [u8; 32] {
        self.seed
    }

    pub fn counter(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn next_u128(&mut self) -> u128 {
        let lo = self.inner.next_u64() as u128;
        let hi = self.inner.next_u64() as u128;
        (hi << 64) | lo
    }

    pub fn bytes<const N: usize>(&mut self) -> [u8; N] {
        let mut out = [0u8; N];
        self.inner.fill_bytes(&mut out);
        out
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

impl fmt::Debug for SeededRng {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SeededRng").field("counter", &self.counter()).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::RngCore;

    fn small() -> RingParams {
        RingParams::new(8, 4).unwrap()
    }

    #[test]
    fn params_validation() {
        assert!(RingParams::new(1, 4).is_err());
        assert!(RingParams::new(8, 0).is_err());
        assert!(RingParams::new(64, 65).is_err());
        assert!(RingParams::new(64, 64).is_ok());
        assert_eq!(RingParams::default(), RingParams::new(64, 64).unwrap());
    }

    #[test]
    fn add_examples() {
        let p = small();
        assert_eq!(add(p.element(4000), p.element(200)).unwrap().value(), 104);
        assert_eq!(add(p.element(2047), p.element(2049)).unwrap().value(), 0);
        let x = p.element(1234);
        assert_eq!(add(x, p.zero()).unwrap(), x);
    }

    #[test]
    fn add_wrap_matches_integer_oracle() {
        let p = small();
        for a in (0..4096u128).step_by(7) {
            for b in (0..4096u128).step_by(13) {
                assert_eq!((p.element(a) + p.element(b)).value(), (a + b) % 4096);
            }
        }
    }

    #[test]
    fn mul_examples() {
        let p = small();
        assert_eq!(mul(p.element(100), p.element(50)).unwrap().value(), 904);
        let x = p.element(777);
        assert_eq!(mul(x, p.one()).unwrap(), x);
        let d = RingParams::DEFAULT;
        assert_eq!((d.element(1u128 << 127) * d.element(2)).value(), 0);
    }

    #[test]
    fn mismatched_params_rejected() {
        let a = small().element(3);
        let b = RingParams::DEFAULT.element(3);
        assert!(matches!(add(a, b), Err(Error::ParamMismatch)));
        assert!(matches!(mul(a, b), Err(Error::ParamMismatch)));
    }

    #[test]
    fn signed_interpretation() {
        let p = small();
        assert_eq!(p.element(255).to_signed_l(), -1);
        assert_eq!(p.element(4095).to_signed_l(), -1);
        assert_eq!(p.element(5).to_signed_l(), 5);
        assert_eq!(p.element(128).to_signed_l(), -128);
        assert_eq!(p.element(127).to_signed_l(), 127);
    }

    #[test]
    fn signed_roundtrip_exhaustive_l8() {
        let p = small();
        for x in -128i128..128 {
            assert_eq!(p.from_signed(x).to_signed_l(), x);
        }
    }

    #[test]
    fn signed_extremes_wide_ring() {
        let p = RingParams::new(127, 1).unwrap();
        assert_eq!(p.from_signed(-(1i128 << 126)).to_signed_l(), -(1i128 << 126));
        assert_eq!(p.from_signed((1i128 << 126) - 1).to_signed_l(), (1i128 << 126) - 1);
    }

    #[test]
    fn ring_laws_exhaustive_on_6_bit_ring() {
        let p = RingParams::new(3, 3).unwrap();
        let all: Vec<_> = (0..64u128).map(|v| p.element(v)).collect();
        for &a in &all {
            for &b in &all {
                assert_eq!(a + b, b + a);
                assert_eq!(a * b, b * a);
                for &c in &all {
                    assert_eq!((a + b) + c, a + (b + c));
                    assert_eq!((a * b) * c, a * (b * c));
                }
            }
        }
    }

    #[test]
    fn sample_uniform_regression_vector() {
        let mut rng = SeededRng::new([0u8; 32]);
        let first = sample_uniform(&mut rng, RingParams::DEFAULT);
        assert_eq!(first.value(), PINNED_FIRST_DRAW);
        let mut again = SeededRng::with_counter([0u8; 32], 0);
        assert_eq!(sample_uniform(&mut again, RingParams::DEFAULT), first);
        // resuming at the word position reproduces the later draw
        let second = sample_uniform(&mut rng, RingParams::DEFAULT);
        let mut resumed = SeededRng::with_counter([0u8; 32], 4);
        assert_eq!(sample_uniform(&mut resumed, RingParams::DEFAULT), second);
    }

    // first 16 keystream bytes of ChaCha20 under the all-zero key and nonce
    const PINNED_FIRST_DRAW: u128 = 0x28bd_8653_e56a_5d40_903d_f1a0_ade0_b876;

    #[test]
    fn sample_uniform_mean() {
        let mut rng = SeededRng::from_u64(99);
        let p = RingParams::DEFAULT;
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| sample_uniform(&mut rng, p).value() as f64 / 2f64.powi(128))
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
        let small = small();
        let mean_small: f64 = (0..n)
            .map(|_| sample_uniform(&mut rng, small).value() as f64 / 4096.0)
            .sum::<f64>()
            / n as f64;
        assert!((mean_small - 0.5).abs() < 0.01, "mean {mean_small}");
    }

    #[test]
    fn derived_streams_differ() {
        let root = SeededRng::from_u64(1);
        let mut a = root.derive("a");
        let mut b = root.derive("b");
        let mut a2 = root.derive("a");
        let x = a.next_u128();
        assert_ne!(x, b.next_u128());
        assert_eq!(x, a2.next_u128());
    }

    #[test]
    fn decode_rejects_out_of_ring() {
        let p = small();
        assert!(p.decode_element(&4096u128.to_le_bytes()).is_err());
        assert_eq!(p.decode_element(&4095u128.to_le_bytes()).unwrap().value(), 4095);
        assert!(p.decode_element(&[0u8; 5]).is_err());
    }

    #[test]
    fn codec_roundtrip_error_bound() {
        let codec = FixedCodec::new(7);
        let p = RingParams::DEFAULT;
        let mut rng = SeededRng::from_u64(5);
        let bound = 2f64.powi(-8);
        for _ in 0..10_000 {
            let q = (rng.next_u64() as f64 / u64::MAX as f64) * 2.0 - 1.0;
            let back = codec.decode(codec.encode(q, p));
            assert!((back - q).abs() <= bound + 1e-15, "{q} -> {back}");
        }
    }

    proptest! {
        #[test]
        fn mul_matches_bigint_oracle(a in any::<u64>(), b in any::<u64>(), c in any::<u64>(), d in any::<u64>()) {
            // (a + b 2^64)(c + d 2^64) mod 2^128 = ac + (ad + bc) 2^64
            let p = RingParams::DEFAULT;
            let x = p.element((a as u128) | ((b as u128) << 64));
            let y = p.element((c as u128) | ((d as u128) << 64));
            let ac = (a as u128) * (c as u128);
            let cross = (a as u128).wrapping_mul(d as u128).wrapping_add((b as u128).wrapping_mul(c as u128));
            prop_assert_eq!((x * y).value(), ac.wrapping_add(cross << 64));
        }
    }
}
