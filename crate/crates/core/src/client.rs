//! Client side: template preprocessing, quantization and outsourcing.
//!
//! Cosine templates are normalized and padded with a zero; euclidean
//! templates become `[2T, -sum T^2]` at registration and `[T, 1]` at
//! authentication, so a larger inner product means a smaller distance.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ring::{FixedCodec, RingElement, RingParams, SeededRng, ELEMENT_BYTES};
use crate::shares::PartyId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Metric {
    Cosine,
    Euclidean,
}

impl Metric {
    pub fn code(self) -> u8 {
        match self {
            Metric::Cosine => 0,
            Metric::Euclidean => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Metric> {
        match code {
            0 => Some(Metric::Cosine),
            1 => Some(Metric::Euclidean),
            _ => None,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Metric> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            _ => Err(Error::config(format!("unknown metric {s:?} (expected cosine or euclidean)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Registration,
    Authentication,
}

impl Phase {
    pub fn code(self) -> u8 {
        match self {
            Phase::Registration => 0,
            Phase::Authentication => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Phase> {
        match code {
            0 => Some(Phase::Registration),
            1 => Some(Phase::Authentication),
            _ => None,
        }
    }
}

/// A template after metric preprocessing, length `n + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedTemplate {
    pub values: Vec<f64>,
    pub metric: Metric,
    pub phase: Phase,
}

pub fn preprocess(template: &[f64], metric: Metric, phase: Phase) -> Result<PreparedTemplate> {
    if template.is_empty() {
        return Err(Error::Preprocess("empty template".into()));
    }
    if template.iter().any(|v| !v.is_finite()) {
        return Err(Error::Preprocess("template has non-finite entries".into()));
    }
    let values = match metric {
        Metric::Cosine => {
            let norm = template.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Preprocess("cannot normalize a zero template".into()));
            }
            let mut out: Vec<f64> = template.iter().map(|v| v / norm).collect();
            out.push(0.0);
            out
        }
        Metric::Euclidean => {
            if template.iter().any(|v| v.fract() != 0.0) {
                return Err(Error::Preprocess("euclidean templates must be integral".into()));
            }
            match phase {
                Phase::Registration => {
                    let mut out: Vec<f64> = template.iter().map(|v| 2.0 * v).collect();
                    out.push(-template.iter().map(|v| v * v).sum::<f64>());
                    out
                }
                Phase::Authentication => {
                    let mut out = template.to_vec();
                    out.push(1.0);
                    out
                }
            }
        }
    };
    Ok(PreparedTemplate { values, metric, phase })
}

/// Integer encoding: cosine entries scale by `2^f` into `[-2^f, 2^f - 1]`;
/// euclidean entries are already integers.
pub fn quantize(p: &PreparedTemplate, codec: FixedCodec) -> Result<Vec<i128>> {
    match p.metric {
        Metric::Cosine => {
            let hi = (1i128 << codec.scale_bits) - 1;
            p.values
                .iter()
                .map(|&v| {
                    if !(-1.0..=1.0).contains(&v) {
                        return Err(Error::Preprocess(format!("cosine entry {v} outside [-1, 1]")));
                    }
                    Ok(codec.quantize(v).clamp(-hi - 1, hi))
                })
                .collect()
        }
        Metric::Euclidean => p
            .values
            .iter()
            .map(|&v| {
                if v.abs() >= 2f64.powi(100) {
                    return Err(Error::Preprocess(format!("euclidean entry {v} too large")));
                }
                Ok(v as i128)
            })
            .collect(),
    }
}

/// Additive shares of a prepared template and claimed identity, one
/// vector per server.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OutsourcedTemplate {
    pub template: [Vec<RingElement>; 2],
    pub identity: [RingElement; 2],
}

pub fn outsource(q: &[i128], identity: u64, params: RingParams, rng: &mut SeededRng) -> OutsourcedTemplate {
    let mut template = [Vec::with_capacity(q.len()), Vec::with_capacity(q.len())];
    for &v in q {
        let r = params.element(rng.next_u128());
        template[0].push(r);
        template[1].push(params.from_signed(v) - r);
    }
    let r = params.element(rng.next_u128());
    OutsourcedTemplate { template, identity: [r, params.element(identity as u128) - r] }
}

/// What a server receives from the client: metric, phase, raw dimension,
/// identity share and template shares.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Request {
    pub metric: Metric,
    pub phase: Phase,
    pub n: u32,
    pub identity: RingElement,
    pub shares: Vec<RingElement>,
}

impl Request {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + ELEMENT_BYTES * (1 + self.shares.len()));
        out.push(self.metric.code());
        out.push(self.phase.code());
        out.extend_from_slice(&self.n.to_le_bytes());
        out.extend_from_slice(&self.identity.to_le_bytes());
        for s in &self.shares {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], params: RingParams) -> Result<Request> {
        if bytes.len() < 6 + ELEMENT_BYTES {
            return Err(Error::Decode("request truncated".into()));
        }
        let metric = Metric::from_code(bytes[0]).ok_or_else(|| Error::Decode(format!("metric flag {}", bytes[0])))?;
        let phase = Phase::from_code(bytes[1]).ok_or_else(|| Error::Decode(format!("phase flag {}", bytes[1])))?;
        let n = u32::from_le_bytes(bytes[2..6].try_into().unwrap());
        let rest = &bytes[6..];
        if rest.len() != ELEMENT_BYTES * (n as usize + 2) {
            return Err(Error::Decode(format!("request for n = {n} has {} share bytes", rest.len())));
        }
        let mut elems = params.decode_elements(rest)?;
        let identity = elems.remove(0);
        Ok(Request { metric, phase, n, identity, shares: elems })
    }

    /// Database entry layout: identity first, then the template.
    pub fn entry(&self) -> Vec<RingElement> {
        let mut out = Vec::with_capacity(self.shares.len() + 1);
        out.push(self.identity);
        out.extend_from_slice(&self.shares);
        out
    }
}

pub struct Client {
    pub params: RingParams,
    pub codec: FixedCodec,
    rng: SeededRng,
}

impl Client {
    pub fn new(params: RingParams, rng: SeededRng) -> Self {
        Client { params, codec: FixedCodec::default(), rng }
    }

    /// Preprocesses, quantizes and splits a template into one request per server.
    pub fn request(&mut self, template: &[f64], identity: u64, metric: Metric, phase: Phase) -> Result<[Request; 2]> {
        let q = quantize(&preprocess(template, metric, phase)?, self.codec)?;
        let out = outsource(&q, identity, self.params, &mut self.rng);
        let [t0, t1] = out.template;
        let n = template.len() as u32;
        Ok([
            Request { metric, phase, n, identity: out.identity[0], shares: t0 },
            Request { metric, phase, n, identity: out.identity[1], shares: t1 },
        ])
    }
}

/// The request addressed to `party`.
pub fn for_party(requests: &[Request; 2], party: PartyId) -> &Request {
    &requests[party.index()]
}
