//! Local share algebra: additive shares, masked (delta, lambda) shares and
//! MAC-carrying pairs. Nothing in this module communicates.

use std::fmt;

use crate::error::{Error, Result};
use crate::ring::{RingElement, RingParams, SeededRng, ELEMENT_BYTES};

/// One of the two computing servers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PartyId(u8);

impl PartyId {
    pub const P0: PartyId = PartyId(0);
    pub const P1: PartyId = PartyId(1);

    pub fn new(index: u8) -> Result<Self> {
        match index {
            0 | 1 => Ok(PartyId(index)),
            _ => Err(Error::config(format!("party index must be 0 or 1, got {index}"))),
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn as_u8(self) -> u8 {
        self.0
    }

    /// Party 0 carries the public terms of every local product.
    pub fn is_leader(self) -> bool {
        self.0 == 0
    }

    pub fn peer(self) -> PartyId {
        PartyId(1 - self.0)
    }

    pub fn both() -> [PartyId; 2] {
        [PartyId::P0, PartyId::P1]
    }
}

impl fmt::Display for PartyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.0)
    }
}

/// `<x>_party`, with `<x>_0 + <x>_1 = x`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AddShare {
    pub party: PartyId,
    pub value: RingElement,
}

impl AddShare {
    pub fn new(party: PartyId, value: RingElement) -> Self {
        AddShare { party, value }
    }
}

/// Additive share of the global MAC key.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MacKeyShare {
    pub party: PartyId,
    pub share: RingElement,
}

/// Masked share `(delta, <lambda>)` with `delta = x + lambda`.
///
/// `delta` is public and identical at both parties; only `lambda` is private.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OptShare {
    pub party: PartyId,
    pub delta: RingElement,
    pub lambda: RingElement,
}

impl OptShare {
    pub fn new(party: PartyId, delta: RingElement, lambda: RingElement) -> Self {
        OptShare { party, delta, lambda }
    }

    /// Share of a public constant: `delta = p`, `lambda = 0`.
    pub fn public(party: PartyId, p: RingElement) -> Self {
        OptShare { party, delta: p, lambda: p.params().zero() }
    }

    pub fn params(&self) -> RingParams {
        self.delta.params()
    }

    pub fn add(&self, other: &OptShare) -> OptShare {
        debug_assert_eq!(self.party, other.party);
        OptShare::new(self.party, self.delta + other.delta, self.lambda + other.lambda)
    }

    pub fn sub(&self, other: &OptShare) -> OptShare {
        debug_assert_eq!(self.party, other.party);
        OptShare::new(self.party, self.delta - other.delta, self.lambda - other.lambda)
    }

    pub fn neg(&self) -> OptShare {
        OptShare::new(self.party, -self.delta, -self.lambda)
    }

    pub fn add_public(&self, p: RingElement) -> OptShare {
        OptShare::new(self.party, self.delta + p, self.lambda)
    }

    pub fn mul_public(&self, p: RingElement) -> OptShare {
        OptShare::new(self.party, self.delta * p, self.lambda * p)
    }

    /// The canonical additive share of the hidden value:
    /// `delta - <lambda>_0` at party 0 and `-<lambda>_1` at party 1.
    pub fn additive_share(&self) -> RingElement {
        if self.party.is_leader() {
            self.delta - self.lambda
        } else {
            -self.lambda
        }
    }

    pub fn to_bytes(&self) -> [u8; 2 * ELEMENT_BYTES] {
        let mut out = [0u8; 2 * ELEMENT_BYTES];
        out[..ELEMENT_BYTES].copy_from_slice(&self.delta.to_le_bytes());
        out[ELEMENT_BYTES..].copy_from_slice(&self.lambda.to_le_bytes());
        out
    }

    pub fn from_bytes(party: PartyId, params: RingParams, bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 2 * ELEMENT_BYTES {
            return Err(Error::Decode("truncated masked share".into()));
        }
        Ok(OptShare::new(
            party,
            params.decode_element(&bytes[..ELEMENT_BYTES])?,
            params.decode_element(&bytes[ELEMENT_BYTES..2 * ELEMENT_BYTES])?,
        ))
    }
}

/// A masked share of `v` together with a masked share of `mac_key * v`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AuthPair {
    pub value: OptShare,
    pub mac: OptShare,
}

impl AuthPair {
    pub const BYTES: usize = 4 * ELEMENT_BYTES;

    pub fn new(value: OptShare, mac: OptShare) -> Self {
        AuthPair { value, mac }
    }

    pub fn party(&self) -> PartyId {
        self.value.party
    }

    pub fn add(&self, other: &AuthPair) -> AuthPair {
        AuthPair::new(self.value.add(&other.value), self.mac.add(&other.mac))
    }

    pub fn sub(&self, other: &AuthPair) -> AuthPair {
        AuthPair::new(self.value.sub(&other.value), self.mac.sub(&other.mac))
    }

    pub fn mul_public(&self, p: RingElement) -> AuthPair {
        AuthPair::new(self.value.mul_public(p), self.mac.mul_public(p))
    }

    /// Adds a public constant. The MAC side needs `mac_key * p`, which is
    /// `mac_key.mul_public(p)` for a masked share `mac_key` of the MAC key.
    pub fn add_public(&self, p: RingElement, mac_key: &OptShare) -> AuthPair {
        AuthPair::new(self.value.add_public(p), self.mac.add(&mac_key.mul_public(p)))
    }

    /// `p - self`, using the masked MAC key for the constant's tag.
    pub fn public_minus(&self, p: RingElement, mac_key: &OptShare) -> AuthPair {
        AuthPair::new(self.value.neg(), self.mac.neg()).add_public(p, mac_key)
    }

    pub fn to_bytes(&self) -> [u8; Self::BYTES] {
        let mut out = [0u8; Self::BYTES];
        out[..32].copy_from_slice(&self.value.to_bytes());
        out[32..].copy_from_slice(&self.mac.to_bytes());
        out
    }

    pub fn from_bytes(party: PartyId, params: RingParams, bytes: &[u8]) -> Result<Self> {
        if bytes.len() < Self::BYTES {
            return Err(Error::Decode("truncated authenticated pair".into()));
        }
        Ok(AuthPair::new(
            OptShare::from_bytes(party, params, &bytes[..32])?,
            OptShare::from_bytes(party, params, &bytes[32..64])?,
        ))
    }
}

/// Splits `x` into two additive shares with a uniform first share.
pub fn split(x: RingElement, rng: &mut SeededRng) -> (AddShare, AddShare) {
    let r = x.params().element(rng.next_u128());
    (AddShare::new(PartyId::P0, r), AddShare::new(PartyId::P1, x - r))
}

/// Splits each entry of `xs`, returning the two share vectors.
pub fn split_vec(xs: &[RingElement], rng: &mut SeededRng) -> [Vec<RingElement>; 2] {
    let mut s0 = Vec::with_capacity(xs.len());
    let mut s1 = Vec::with_capacity(xs.len());
    for &x in xs {
        let (a, b) = split(x, rng);
        s0.push(a.value);
        s1.push(b.value);
    }
    [s0, s1]
}

pub fn reconstruct(a: &AddShare, b: &AddShare) -> RingElement {
    a.value + b.value
}

/// `delta - <lambda>_0 - <lambda>_1`.
pub fn open(s0: &OptShare, s1: &OptShare) -> Result<RingElement> {
    if s0.delta != s1.delta {
        return Err(Error::DeltaMismatch);
    }
    Ok(s0.delta - s0.lambda - s1.lambda)
}

pub fn add_opt(a: &OptShare, b: &OptShare) -> OptShare {
    a.add(b)
}

pub fn add_public(a: &OptShare, p: RingElement) -> OptShare {
    a.add_public(p)
}

pub fn mul_public(a: &OptShare, p: RingElement) -> OptShare {
    a.mul_public(p)
}

/// Opens both halves of an authenticated pair.
pub fn open_pair(a0: &AuthPair, a1: &AuthPair) -> Result<(RingElement, RingElement)> {
    Ok((open(&a0.value, &a1.value)?, open(&a0.mac, &a1.mac)?))
}
