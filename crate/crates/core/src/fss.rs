//! Distributed comparison function with a two-component ring payload.
//!
//! `gen_lt(a, beta)` yields two keys whose evaluations at `x` sum to `beta`
//! when `x < a` and to zero otherwise. The tree is walked MSB first; each
//! level carries one seed correction, two control-bit corrections and one
//! payload correction.
//!
//! PRG: `H = SHA-256`. `H(s || 0x00)` and `H(s || 0x01)` give the left and
//! right child (seed = first 16 bytes, control bit = low bit of byte 16).
//! `H(s || 0x02)` and `H(s || 0x03)` give the left and right payload words,
//! read as two little-endian u128 halves reduced into the ring. The leaf
//! payload word is `H(s || 0x02)`.

use std::ops::{Add, Neg, Sub};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ring::{RingElement, RingParams, SeededRng, ELEMENT_BYTES};
use crate::shares::PartyId;
use crate::tape::{ByteReader, ByteWriter};

pub const SEED_BYTES: usize = 16;
pub const KEY_MAGIC: &[u8; 4] = b"DCF1";

type Seed = [u8; SEED_BYTES];

/// Payload pair, e.g. `(b, mac_key * b)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Payload2 {
    pub c0: RingElement,
    pub c1: RingElement,
}

impl Payload2 {
    pub fn new(c0: RingElement, c1: RingElement) -> Self {
        Payload2 { c0, c1 }
    }

    pub fn zero(params: RingParams) -> Self {
        Payload2::new(params.zero(), params.zero())
    }

    fn negate_if(self, negate: bool) -> Self {
        Payload2::new(self.c0.negate_if(negate), self.c1.negate_if(negate))
    }

    fn scale_bit(self, bit: bool) -> Self {
        if bit {
            self
        } else {
            Payload2::zero(self.c0.params())
        }
    }
}

impl Add for Payload2 {
    type Output = Payload2;
    fn add(self, rhs: Payload2) -> Payload2 {
        Payload2::new(self.c0 + rhs.c0, self.c1 + rhs.c1)
    }
}

impl Sub for Payload2 {
    type Output = Payload2;
    fn sub(self, rhs: Payload2) -> Payload2 {
        Payload2::new(self.c0 - rhs.c0, self.c1 - rhs.c1)
    }
}

impl Neg for Payload2 {
    type Output = Payload2;
    fn neg(self) -> Payload2 {
        Payload2::new(-self.c0, -self.c1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorrectionWord {
    pub seed: Seed,
    pub bit_left: bool,
    pub bit_right: bool,
    pub value: Payload2,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DcfKey {
    pub party: PartyId,
    pub domain_bits: u32,
    pub root_seed: Seed,
    pub root_bit: bool,
    pub correction_words: Vec<CorrectionWord>,
    pub final_correction: Payload2,
}

fn hash(seed: &Seed, tag: u8) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed);
    h.update([tag]);
    h.finalize().into()
}

fn expand(seed: &Seed, right: bool) -> (Seed, bool) {
    let d = hash(seed, right as u8);
    (d[..SEED_BYTES].try_into().unwrap(), d[SEED_BYTES] & 1 == 1)
}

fn convert(seed: &Seed, right: bool, params: RingParams) -> Payload2 {
    let d = hash(seed, 2 + right as u8);
    Payload2::new(
        params.element(u128::from_le_bytes(d[..16].try_into().unwrap())),
        params.element(u128::from_le_bytes(d[16..].try_into().unwrap())),
    )
}

fn xor(a: &Seed, b: &Seed) -> Seed {
    let mut out = *a;
    for (o, x) in out.iter_mut().zip(b) {
        *o ^= x;
    }
    out
}

fn bit_at(x: u128, domain_bits: u32, level: u32) -> bool {
    (x >> (domain_bits - 1 - level)) & 1 == 1
}

fn check_domain(x: RingElement, domain_bits: u32) -> Result<()> {
    if domain_bits == 0 || domain_bits > x.params().bits() {
        return Err(Error::config(format!(
            "DCF domain of {domain_bits} bits does not fit a {}-bit ring",
            x.params().bits()
        )));
    }
    if domain_bits < 128 && x.value() >> domain_bits != 0 {
        return Err(Error::config(format!("input outside the {domain_bits}-bit DCF domain")));
    }
    Ok(())
}

/// Generates keys for `x -> payload * 1{x < a}` over `domain_bits`-bit inputs.
pub fn gen_lt(
    a: RingElement,
    payload: Payload2,
    domain_bits: u32,
    rng: &mut SeededRng,
) -> Result<(DcfKey, DcfKey)> {
    let params = a.params();
    check_domain(a, domain_bits)?;
    if payload.c0.params() != params || payload.c1.params() != params {
        return Err(Error::ParamMismatch);
    }
    let roots: [Seed; 2] = [rng.bytes(), rng.bytes()];
    let mut s = roots;
    let mut t = [false, true];
    let mut v_alpha = Payload2::zero(params);
    let mut cws = Vec::with_capacity(domain_bits as usize);

    for level in 0..domain_bits {
        let alpha = bit_at(a.value(), domain_bits, level);
        let children: [[(Seed, bool); 2]; 2] =
            [0, 1].map(|b| [expand(&s[b], false), expand(&s[b], true)]);
        let values: [[Payload2; 2]; 2] =
            [0, 1].map(|b| [convert(&s[b], false, params), convert(&s[b], true, params)]);
        let keep = alpha as usize;
        let lose = 1 - keep;

        let seed_cw = xor(&children[0][lose].0, &children[1][lose].0);
        let mut value_cw = (values[1][lose] - values[0][lose] - v_alpha).negate_if(t[1]);
        if lose == 0 {
            value_cw = value_cw + payload.negate_if(t[1]);
        }
        v_alpha = v_alpha - values[1][keep] + values[0][keep] + value_cw.negate_if(t[1]);

        let bit_cw = [
            children[0][0].1 ^ children[1][0].1 ^ alpha ^ true,
            children[0][1].1 ^ children[1][1].1 ^ alpha,
        ];
        for b in 0..2 {
            let (child_seed, child_bit) = children[b][keep];
            s[b] = if t[b] { xor(&child_seed, &seed_cw) } else { child_seed };
            t[b] = child_bit ^ (t[b] & bit_cw[keep]);
        }
        cws.push(CorrectionWord {
            seed: seed_cw,
            bit_left: bit_cw[0],
            bit_right: bit_cw[1],
            value: value_cw,
        });
    }

    let final_correction = (convert(&s[1], false, params) - convert(&s[0], false, params) - v_alpha).negate_if(t[1]);
    let key = |b: usize| DcfKey {
        party: if b == 0 { PartyId::P0 } else { PartyId::P1 },
        domain_bits,
        root_seed: roots[b],
        root_bit: b == 1,
        correction_words: cws.clone(),
        final_correction,
    };
    Ok((key(0), key(1)))
}

/// This party's additive share of `payload * 1{x < a}`.
pub fn eval_lt(party: PartyId, key: &DcfKey, x: RingElement) -> Result<Payload2> {
    let params = x.params();
    check_domain(x, key.domain_bits)?;
    if key.correction_words.len() != key.domain_bits as usize {
        return Err(Error::Decode("DCF key has the wrong number of correction words".into()));
    }
    if key.final_correction.c0.params() != params {
        return Err(Error::ParamMismatch);
    }
    let negate = party == PartyId::P1;
    let mut s = key.root_seed;
    let mut t = key.root_bit;
    let mut v = Payload2::zero(params);
    for (level, cw) in key.correction_words.iter().enumerate() {
        let dir = bit_at(x.value(), key.domain_bits, level as u32);
        let (mut child, mut child_bit) = expand(&s, dir);
        let word = convert(&s, dir, params);
        v = v + (word + cw.value.scale_bit(t)).negate_if(negate);
        if t {
            child = xor(&child, &cw.seed);
            child_bit ^= if dir { cw.bit_right } else { cw.bit_left };
        }
        s = child;
        t = child_bit;
    }
    Ok(v + (convert(&s, false, params) + key.final_correction.scale_bit(t)).negate_if(negate))
}

impl DcfKey {
    pub fn encoded_len(&self) -> usize {
        4 + 2 + SEED_BYTES + 1 + self.correction_words.len() * (SEED_BYTES + 2 + 2 * ELEMENT_BYTES) + 2 * ELEMENT_BYTES
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(KEY_MAGIC);
        w.u8(self.domain_bits as u8);
        w.u8(self.party.as_u8());
        w.bytes(&self.root_seed);
        w.u8(self.root_bit as u8);
        for cw in &self.correction_words {
            w.bytes(&cw.seed);
            w.u8(cw.bit_left as u8);
            w.u8(cw.bit_right as u8);
            w.element(cw.value.c0);
            w.element(cw.value.c1);
        }
        w.element(self.final_correction.c0);
        w.element(self.final_correction.c1);
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8], params: RingParams) -> Result<DcfKey> {
        let bad = |e: crate::tape::TapeError| Error::Decode(format!("DCF key: {e}"));
        let mut r = ByteReader::new(bytes);
        if r.take(4).map_err(bad)? != KEY_MAGIC {
            return Err(Error::Decode("DCF key: bad magic".into()));
        }
        let domain_bits = r.u8().map_err(bad)? as u32;
        if domain_bits == 0 || domain_bits > params.bits() {
            return Err(Error::Decode(format!("DCF key: domain of {domain_bits} bits")));
        }
        let party = PartyId::new(r.u8().map_err(bad)?).map_err(|_| Error::Decode("DCF key: party".into()))?;
        let root_seed = r.array().map_err(bad)?;
        let root_bit = decode_bit(r.u8().map_err(bad)?)?;
        let mut correction_words = Vec::with_capacity(domain_bits as usize);
        for _ in 0..domain_bits {
            let seed = r.array().map_err(bad)?;
            let bit_left = decode_bit(r.u8().map_err(bad)?)?;
            let bit_right = decode_bit(r.u8().map_err(bad)?)?;
            let value = Payload2::new(r.element(params).map_err(bad)?, r.element(params).map_err(bad)?);
            correction_words.push(CorrectionWord { seed, bit_left, bit_right, value });
        }
        let final_correction = Payload2::new(r.element(params).map_err(bad)?, r.element(params).map_err(bad)?);
        if !r.is_empty() {
            return Err(Error::Decode("DCF key: trailing bytes".into()));
        }
        Ok(DcfKey { party, domain_bits, root_seed, root_bit, correction_words, final_correction })
    }
}

fn decode_bit(b: u8) -> Result<bool> {
    match b {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(Error::Decode(format!("DCF key: control bit byte {b}"))),
    }
}
