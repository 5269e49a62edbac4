//! Trusted dealer: generates every input-independent correlation for both
//! servers in one pass and writes them to per-party tapes.
//!
//! The dealer knows all masks in the clear, so the offline "open delta"
//! steps are computed directly and written identically to both tapes.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fss::{eval_lt, gen_lt, DcfKey, Payload2};
use crate::node::TemplateDb;
use crate::protocols::{Mode, SessionTape};
use crate::ring::{RingElement, RingParams, SeededRng};
use crate::shares::{AuthPair, MacKeyShare, OptShare, PartyId};
use crate::tape::{ByteReader, ByteWriter, Container, Section, TapeError};

pub mod tag {
    pub const MACKEY: u8 = 1;
    pub const OFFSETS: u8 = 2;
    pub const INIT_MULTS: u8 = 3;
    pub const MULTS: u8 = 4;
    pub const SECIP: u8 = 5;
    pub const SECCMP: u8 = 6;
    pub const MACAUX: u8 = 7;
    pub const SESSIONS: u8 = 8;
    pub const DB: u8 = 9;
    pub const CURSOR: u8 = 10;
}

/// One party's view of a multiplication correlation bound to the masks of
/// its two inputs: `delta_x = a - lambda_x`, `delta_y = b - lambda_y`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultCorrelation {
    pub a: RingElement,
    pub b: RingElement,
    pub c: RingElement,
    pub delta_x: RingElement,
    pub delta_y: RingElement,
    pub lambda_z: RingElement,
}

impl MultCorrelation {
    pub const BYTES: usize = 96;

    fn write(&self, w: &mut ByteWriter) {
        w.elements(&[self.a, self.b, self.c, self.delta_x, self.delta_y, self.lambda_z]);
    }

    fn read(r: &mut ByteReader, p: RingParams) -> std::result::Result<Self, TapeError> {
        Ok(MultCorrelation {
            a: r.element(p)?,
            b: r.element(p)?,
            c: r.element(p)?,
            delta_x: r.element(p)?,
            delta_y: r.element(p)?,
            lambda_z: r.element(p)?,
        })
    }
}

/// Shared triples `(A, B, C)` with `A[i] * B[i] = C[i]`, indexed by party.
#[derive(Clone, Debug)]
pub struct TripleBatch {
    pub a: [Vec<RingElement>; 2],
    pub b: [Vec<RingElement>; 2],
    pub c: [Vec<RingElement>; 2],
}

impl TripleBatch {
    pub fn len(&self) -> usize {
        self.a[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn reconstruct(&self, i: usize) -> (RingElement, RingElement, RingElement) {
        (
            self.a[0][i] + self.a[1][i],
            self.b[0][i] + self.b[1][i],
            self.c[0][i] + self.c[1][i],
        )
    }
}

/// One party's correlation for a length-n inner product. The two triples
/// share `B`; the three delta vectors are public.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SecIpCorrelation {
    pub a1: Vec<RingElement>,
    pub a2: Vec<RingElement>,
    pub b: Vec<RingElement>,
    pub c1: Vec<RingElement>,
    pub c2: Vec<RingElement>,
    pub delta_x: Vec<RingElement>,
    pub delta_mac_x: Vec<RingElement>,
    pub delta_y: Vec<RingElement>,
    pub lambda_z: RingElement,
    pub lambda_mac_z: RingElement,
}

impl SecIpCorrelation {
    pub fn n(&self) -> usize {
        self.b.len()
    }

    fn arrays(&self) -> [&Vec<RingElement>; 8] {
        [&self.a1, &self.a2, &self.b, &self.c1, &self.c2, &self.delta_x, &self.delta_mac_x, &self.delta_y]
    }

    fn write(&self, w: &mut ByteWriter) {
        w.u32(self.n() as u32);
        w.element(self.lambda_z);
        w.element(self.lambda_mac_z);
        for a in self.arrays() {
            w.elements(a);
        }
    }

    fn read(r: &mut ByteReader, p: RingParams) -> std::result::Result<Self, TapeError> {
        let n = r.u32()? as usize;
        if n.saturating_mul(8 * 16) > r.remaining() {
            return Err(TapeError::Truncated);
        }
        let lambda_z = r.element(p)?;
        let lambda_mac_z = r.element(p)?;
        let mut v = || r.elements(p, n);
        Ok(SecIpCorrelation {
            a1: v()?,
            a2: v()?,
            b: v()?,
            c1: v()?,
            c2: v()?,
            delta_x: v()?,
            delta_mac_x: v()?,
            delta_y: v()?,
            lambda_z,
            lambda_mac_z,
        })
    }
}

/// One party's comparison correlation: a DCF key at the input mask with
/// payload `(-1, -mac_key)`, shares of `(1, mac_key)` and the output masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SecCmpCorrelation {
    pub key: DcfKey,
    pub b0: RingElement,
    pub b1: RingElement,
    pub lambda_z: RingElement,
    pub lambda_mac_z: RingElement,
}

impl SecCmpCorrelation {
    fn write(&self, w: &mut ByteWriter) {
        let key = self.key.to_bytes();
        w.u32(key.len() as u32);
        w.bytes(&key);
        w.elements(&[self.b0, self.b1, self.lambda_z, self.lambda_mac_z]);
    }

    fn read(r: &mut ByteReader, p: RingParams) -> std::result::Result<Self, TapeError> {
        let len = r.u32()? as usize;
        let key = DcfKey::from_bytes(r.take(len)?, p).map_err(|e| TapeError::Malformed(e.to_string()))?;
        Ok(SecCmpCorrelation {
            key,
            b0: r.element(p)?,
            b1: r.element(p)?,
            lambda_z: r.element(p)?,
            lambda_mac_z: r.element(p)?,
        })
    }
}

/// Shares of `r` in `[0, 2^s)` and of `mac_key * 2^l * r`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MacAux {
    pub r: RingElement,
    pub keyed_r: RingElement,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SessionPlan {
    pub mode: Mode,
    pub m: u32,
    pub n: u32,
}

/// What the dealer provisions: a database of `m` entries with `n`-dimensional
/// templates, `enroll_batches` enrollment calls and one session per mode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProvisionPlan {
    pub params: RingParams,
    pub m: usize,
    pub n: usize,
    pub enroll_batches: usize,
    pub sessions: Vec<Mode>,
}

impl ProvisionPlan {
    pub fn new(params: RingParams, m: usize, n: usize, sessions: Vec<Mode>) -> Self {
        ProvisionPlan { params, m, n, enroll_batches: 1, sessions }
    }

    /// Template width after preprocessing.
    pub fn width(&self) -> usize {
        self.n + 1
    }

    fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(Error::config("database size and template length must be positive"));
        }
        if self.enroll_batches == 0 || self.enroll_batches > self.m {
            return Err(Error::config("enrollment batches must be between 1 and m"));
        }
        Ok(())
    }
}

/// Progress markers persisted with the tape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Cursor {
    pub next_session: u32,
    pub enrolled: u32,
    pub m: u32,
    pub n: u32,
}

/// One party's masks and correlations for one enrollment call.
#[derive(Clone, Debug)]
pub struct EnrollTape {
    pub first: u32,
    pub key_lambda: RingElement,
    pub entry_lambdas: Vec<Vec<RingElement>>,
    pub init: Vec<MultCorrelation>,
    pub mac_aux: MacAux,
}

/// One party's offline material, consumed front to back.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorrelationTape {
    pub party: PartyId,
    pub params: RingParams,
    pub key_share: MacKeyShare,
    pub offsets: BTreeMap<String, Vec<RingElement>>,
    pub init_mults: VecDeque<MultCorrelation>,
    pub mults: VecDeque<MultCorrelation>,
    pub secips: VecDeque<SecIpCorrelation>,
    pub seccmps: VecDeque<SecCmpCorrelation>,
    pub mac_aux: VecDeque<MacAux>,
    pub sessions: Vec<SessionPlan>,
    pub db: Option<TemplateDb>,
    pub cursor: Cursor,
}

impl CorrelationTape {
    fn empty(party: PartyId, params: RingParams, key_share: MacKeyShare, cursor: Cursor) -> Self {
        CorrelationTape {
            party,
            params,
            key_share,
            offsets: BTreeMap::new(),
            init_mults: VecDeque::new(),
            mults: VecDeque::new(),
            secips: VecDeque::new(),
            seccmps: VecDeque::new(),
            mac_aux: VecDeque::new(),
            sessions: Vec::new(),
            db: None,
            cursor,
        }
    }

    pub fn offset(&self, label: &str) -> Result<&[RingElement]> {
        self.offsets
            .get(label)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::config(format!("no mask provisioned for wire {label:?}")))
    }

    pub fn pop_init_mult(&mut self) -> Result<MultCorrelation> {
        self.init_mults.pop_front().ok_or(Error::CorrelationExhausted("initialization multiplication"))
    }

    pub fn pop_mult(&mut self) -> Result<MultCorrelation> {
        self.mults.pop_front().ok_or(Error::CorrelationExhausted("multiplication"))
    }

    pub fn pop_secip(&mut self) -> Result<SecIpCorrelation> {
        self.secips.pop_front().ok_or(Error::CorrelationExhausted("inner product"))
    }

    pub fn pop_seccmp(&mut self) -> Result<SecCmpCorrelation> {
        self.seccmps.pop_front().ok_or(Error::CorrelationExhausted("comparison"))
    }

    pub fn pop_mac_aux(&mut self) -> Result<MacAux> {
        self.mac_aux.pop_front().ok_or(Error::CorrelationExhausted("MAC check"))
    }

    /// The plan of the next unconsumed session.
    pub fn next_session(&self) -> Result<SessionPlan> {
        self.sessions
            .get(self.cursor.next_session as usize)
            .copied()
            .ok_or(Error::CorrelationExhausted("session"))
    }

    /// Detaches the next session's correlations. The tape advances even if
    /// the session later aborts, so no correlation is ever used twice.
    pub fn take_session(&mut self) -> Result<SessionTape> {
        let plan = self.next_session()?;
        if self.cursor.enrolled != self.cursor.m {
            return Err(Error::config("database is not fully enrolled"));
        }
        let m = plan.m as usize;
        let (cmps, mults) = match plan.mode {
            Mode::Top1 => (m - 1, 4 * (m - 1) + 1),
            Mode::Threshold => (1, 0),
        };
        if self.secips.len() < m {
            return Err(Error::CorrelationExhausted("inner product"));
        }
        if self.seccmps.len() < cmps {
            return Err(Error::CorrelationExhausted("comparison"));
        }
        if self.mults.len() < mults {
            return Err(Error::CorrelationExhausted("multiplication"));
        }
        let k = self.cursor.next_session;
        let template_lambda = self
            .offsets
            .remove(&format!("s{k}/template"))
            .ok_or_else(|| Error::config(format!("no template mask for session {k}")))?;
        let identity_lambda = self.offsets.remove(&format!("s{k}/identity")).and_then(|v| v.first().copied());
        let mac_aux = self.pop_mac_aux()?;
        self.cursor.next_session += 1;
        Ok(SessionTape {
            index: k,
            mode: plan.mode,
            template_lambda,
            identity_lambda,
            secips: self.secips.drain(..m).collect(),
            seccmps: self.seccmps.drain(..cmps).collect(),
            mults: self.mults.drain(..mults).collect(),
            mac_aux,
        })
    }

    /// Detaches the masks and correlations for enrolling the next `count`
    /// database entries.
    pub fn take_enrollment(&mut self, count: usize) -> Result<EnrollTape> {
        let first = self.cursor.enrolled as usize;
        if count == 0 || first + count > self.cursor.m as usize {
            return Err(Error::CorrelationExhausted("database entry"));
        }
        let width = self.cursor.n as usize + 2;
        if self.init_mults.len() < count * width {
            return Err(Error::CorrelationExhausted("initialization multiplication"));
        }
        let key_lambda = self.offset("mac_key")?[0];
        let entry_lambdas = (first..first + count)
            .map(|j| self.offset(&format!("db[{j}]")).map(<[RingElement]>::to_vec))
            .collect::<Result<Vec<_>>>()?;
        let mac_aux = self.pop_mac_aux()?;
        self.cursor.enrolled += count as u32;
        Ok(EnrollTape {
            first: first as u32,
            key_lambda,
            entry_lambdas,
            init: self.init_mults.drain(..count * width).collect(),
            mac_aux,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut sections = Vec::with_capacity(10);
        let mut push = |tag: u8, count: usize, w: ByteWriter| {
            sections.push(Section { tag, count: count as u32, body: w.into_inner() });
        };

        let mut w = ByteWriter::new();
        w.element(self.key_share.share);
        push(tag::MACKEY, 1, w);

        let mut w = ByteWriter::new();
        for (label, values) in &self.offsets {
            w.u16(label.len() as u16);
            w.bytes(label.as_bytes());
            w.element_vec(values);
        }
        push(tag::OFFSETS, self.offsets.len(), w);

        for (t, queue) in [(tag::INIT_MULTS, &self.init_mults), (tag::MULTS, &self.mults)] {
            let mut w = ByteWriter::new();
            w.buf.reserve(queue.len() * MultCorrelation::BYTES);
            queue.iter().for_each(|c| c.write(&mut w));
            push(t, queue.len(), w);
        }

        let mut w = ByteWriter::new();
        self.secips.iter().for_each(|c| c.write(&mut w));
        push(tag::SECIP, self.secips.len(), w);

        let mut w = ByteWriter::new();
        self.seccmps.iter().for_each(|c| c.write(&mut w));
        push(tag::SECCMP, self.seccmps.len(), w);

        let mut w = ByteWriter::new();
        for a in &self.mac_aux {
            w.element(a.r);
            w.element(a.keyed_r);
        }
        push(tag::MACAUX, self.mac_aux.len(), w);

        let mut w = ByteWriter::new();
        for s in &self.sessions {
            w.u8(s.mode.code());
            w.u32(s.m);
            w.u32(s.n);
        }
        push(tag::SESSIONS, self.sessions.len(), w);

        let mut w = ByteWriter::new();
        if let Some(db) = &self.db {
            db.write(&mut w);
        }
        push(tag::DB, self.db.is_some() as usize, w);

        let mut w = ByteWriter::new();
        w.u32(self.cursor.next_session);
        w.u32(self.cursor.enrolled);
        w.u32(self.cursor.m);
        w.u32(self.cursor.n);
        push(tag::CURSOR, 1, w);

        let container = Container { party: self.party.as_u8(), params: self.params, sections };
        Ok(container.to_bytes()?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<CorrelationTape> {
        let c = Container::from_bytes(bytes)?;
        let p = c.params;
        let party = PartyId::new(c.party).map_err(|_| TapeError::Malformed(format!("party {}", c.party)))?;
        let section = |t: u8| {
            c.section(t)
                .ok_or_else(|| TapeError::Malformed(format!("missing section {t}")))
                .map(|s| (s.count as usize, ByteReader::new(&s.body)))
        };
        let finish = |r: ByteReader, t: u8| {
            if r.is_empty() {
                Ok(())
            } else {
                Err(TapeError::Malformed(format!("trailing bytes in section {t}")))
            }
        };

        let (_, mut r) = section(tag::MACKEY)?;
        let key_share = MacKeyShare { party, share: r.element(p)? };
        finish(r, tag::MACKEY)?;

        let (_, mut r) = section(tag::CURSOR)?;
        let cursor = Cursor { next_session: r.u32()?, enrolled: r.u32()?, m: r.u32()?, n: r.u32()? };
        finish(r, tag::CURSOR)?;

        let mut tape = CorrelationTape::empty(party, p, key_share, cursor);

        let (count, mut r) = section(tag::OFFSETS)?;
        for _ in 0..count {
            let len = r.u16()? as usize;
            let label = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| TapeError::Malformed("offset label is not utf-8".into()))?;
            let values = r.element_vec(p)?;
            tape.offsets.insert(label, values);
        }
        finish(r, tag::OFFSETS)?;

        for t in [tag::INIT_MULTS, tag::MULTS] {
            let (count, mut r) = section(t)?;
            let queue: VecDeque<_> = (0..count).map(|_| MultCorrelation::read(&mut r, p)).collect::<std::result::Result<_, _>>()?;
            finish(r, t)?;
            if t == tag::INIT_MULTS {
                tape.init_mults = queue;
            } else {
                tape.mults = queue;
            }
        }

        let (count, mut r) = section(tag::SECIP)?;
        tape.secips = (0..count).map(|_| SecIpCorrelation::read(&mut r, p)).collect::<std::result::Result<_, _>>()?;
        finish(r, tag::SECIP)?;

        let (count, mut r) = section(tag::SECCMP)?;
        tape.seccmps = (0..count).map(|_| SecCmpCorrelation::read(&mut r, p)).collect::<std::result::Result<_, _>>()?;
        finish(r, tag::SECCMP)?;

        let (count, mut r) = section(tag::MACAUX)?;
        for _ in 0..count {
            tape.mac_aux.push_back(MacAux { r: r.element(p)?, keyed_r: r.element(p)? });
        }
        finish(r, tag::MACAUX)?;

        let (count, mut r) = section(tag::SESSIONS)?;
        for _ in 0..count {
            let code = r.u8()?;
            let mode = Mode::from_code(code).ok_or_else(|| TapeError::Malformed(format!("session mode {code}")))?;
            tape.sessions.push(SessionPlan { mode, m: r.u32()?, n: r.u32()? });
        }
        finish(r, tag::SESSIONS)?;

        let (count, mut r) = section(tag::DB)?;
        if count == 1 {
            tape.db = Some(TemplateDb::read(&mut r, party, p)?);
        }
        finish(r, tag::DB)?;
        Ok(tape)
    }
}

pub fn write_tape(tape: &CorrelationTape, path: &Path) -> Result<()> {
    let bytes = tape.to_bytes()?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_tape(path: &Path) -> Result<CorrelationTape> {
    let bytes = fs::read(path)?;
    CorrelationTape::from_bytes(&bytes)
}

fn fresh(params: RingParams, rng: &mut SeededRng) -> RingElement {
    params.element(rng.next_u128())
}

fn share(x: RingElement, rng: &mut SeededRng) -> [RingElement; 2] {
    let r = fresh(x.params(), rng);
    [r, x - r]
}

fn share_vec(xs: &[RingElement], rng: &mut SeededRng) -> [Vec<RingElement>; 2] {
    let mut out = [Vec::with_capacity(xs.len()), Vec::with_capacity(xs.len())];
    for &x in xs {
        let [a, b] = share(x, rng);
        out[0].push(a);
        out[1].push(b);
    }
    out
}

fn low_bits(params: RingParams, bits: u32, rng: &mut SeededRng) -> RingElement {
    params.element(rng.next_u128() & ((1u128 << bits) - 1))
}

pub fn gen_triples(params: RingParams, count: usize, rng: &mut SeededRng) -> TripleBatch {
    let a: Vec<_> = (0..count).map(|_| fresh(params, rng)).collect();
    let b: Vec<_> = (0..count).map(|_| fresh(params, rng)).collect();
    let c: Vec<_> = a.iter().zip(&b).map(|(&x, &y)| x * y).collect();
    TripleBatch { a: share_vec(&a, rng), b: share_vec(&b, rng), c: share_vec(&c, rng) }
}

/// Multiplication correlation for inputs masked by `lambda_x`, `lambda_y`
/// whose output gets mask `lambda_z`.
pub fn gen_mult_corr(
    lambda_x: RingElement,
    lambda_y: RingElement,
    lambda_z: RingElement,
    rng: &mut SeededRng,
) -> [MultCorrelation; 2] {
    let p = lambda_x.params();
    let (a, b) = (fresh(p, rng), fresh(p, rng));
    let (sa, sb, sc, sz) = (share(a, rng), share(b, rng), share(a * b, rng), share(lambda_z, rng));
    [0, 1].map(|i| MultCorrelation {
        a: sa[i],
        b: sb[i],
        c: sc[i],
        delta_x: a - lambda_x,
        delta_y: b - lambda_y,
        lambda_z: sz[i],
    })
}

pub fn gen_secip_corr(
    lambda_x: &[RingElement],
    lambda_mac_x: &[RingElement],
    lambda_y: &[RingElement],
    lambda_z: RingElement,
    lambda_mac_z: RingElement,
    rng: &mut SeededRng,
) -> Result<[SecIpCorrelation; 2]> {
    let n = lambda_y.len();
    if lambda_x.len() != n || lambda_mac_x.len() != n {
        return Err(Error::config("inner product masks have unequal lengths"));
    }
    let p = lambda_z.params();
    let a1: Vec<_> = (0..n).map(|_| fresh(p, rng)).collect();
    let a2: Vec<_> = (0..n).map(|_| fresh(p, rng)).collect();
    let b: Vec<_> = (0..n).map(|_| fresh(p, rng)).collect();
    let c1: Vec<_> = a1.iter().zip(&b).map(|(&x, &y)| x * y).collect();
    let c2: Vec<_> = a2.iter().zip(&b).map(|(&x, &y)| x * y).collect();
    let delta = |v: &[RingElement], l: &[RingElement]| -> Vec<RingElement> {
        v.iter().zip(l).map(|(&x, &y)| x - y).collect()
    };
    let delta_x = delta(&a1, lambda_x);
    let delta_mac_x = delta(&a2, lambda_mac_x);
    let delta_y = delta(&b, lambda_y);
    let [a1s, a2s, bs, c1s, c2s] = [&a1, &a2, &b, &c1, &c2].map(|v| share_vec(v, rng));
    let (lz, lpz) = (share(lambda_z, rng), share(lambda_mac_z, rng));
    let mut out = Vec::with_capacity(2);
    for i in 0..2 {
        out.push(SecIpCorrelation {
            a1: a1s[i].clone(),
            a2: a2s[i].clone(),
            b: bs[i].clone(),
            c1: c1s[i].clone(),
            c2: c2s[i].clone(),
            delta_x: delta_x.clone(),
            delta_mac_x: delta_mac_x.clone(),
            delta_y: delta_y.clone(),
            lambda_z: lz[i],
            lambda_mac_z: lpz[i],
        });
    }
    let second = out.pop().unwrap();
    Ok([out.pop().unwrap(), second])
}

/// Comparison correlation for an input masked by `lambda_x`.
pub fn gen_seccmp_corr(
    lambda_x: RingElement,
    mac_key: RingElement,
    lambda_z: RingElement,
    lambda_mac_z: RingElement,
    rng: &mut SeededRng,
) -> Result<[SecCmpCorrelation; 2]> {
    let p = lambda_x.params();
    let (k0, k1) = gen_lt(lambda_x, Payload2::new(-p.one(), -mac_key), p.bits(), rng)?;
    let (b0, b1) = (share(p.one(), rng), share(mac_key, rng));
    let (lz, lpz) = (share(lambda_z, rng), share(lambda_mac_z, rng));
    let mk = |i: usize, key: DcfKey| SecCmpCorrelation {
        key,
        b0: b0[i],
        b1: b1[i],
        lambda_z: lz[i],
        lambda_mac_z: lpz[i],
    };
    Ok([mk(0, k0), mk(1, k1)])
}

pub fn gen_maccheck_aux(count: usize, mac_key: RingElement, rng: &mut SeededRng) -> [Vec<MacAux>; 2] {
    let p = mac_key.params();
    let mut out = [Vec::with_capacity(count), Vec::with_capacity(count)];
    for _ in 0..count {
        let r = low_bits(p, p.s(), rng);
        let (rs, ps) = (share(r, rng), share(mac_key * p.two_pow_l() * r, rng));
        for i in 0..2 {
            out[i].push(MacAux { r: rs[i], keyed_r: ps[i] });
        }
    }
    out
}

/// Masked shares of `xs` under fresh dealer masks, with the masks in the
/// clear for binding correlations. Stands in for inputs lifted online.
pub fn deal_masked(xs: &[RingElement], rng: &mut SeededRng) -> ([Vec<OptShare>; 2], Vec<RingElement>) {
    let mut out = [Vec::with_capacity(xs.len()), Vec::with_capacity(xs.len())];
    let mut lambdas = Vec::with_capacity(xs.len());
    for &x in xs {
        let lambda = fresh(x.params(), rng);
        let [l0, l1] = share(lambda, rng);
        out[0].push(OptShare::new(PartyId::P0, x + lambda, l0));
        out[1].push(OptShare::new(PartyId::P1, x + lambda, l1));
        lambdas.push(lambda);
    }
    (out, lambdas)
}

/// Authenticated masked shares of `xs` under MAC key `mac_key`; returns the
/// value masks and the MAC masks.
pub fn deal_authenticated(
    xs: &[RingElement],
    mac_key: RingElement,
    rng: &mut SeededRng,
) -> ([Vec<AuthPair>; 2], Vec<RingElement>, Vec<RingElement>) {
    let (values, lv) = deal_masked(xs, rng);
    let macs: Vec<_> = xs.iter().map(|&x| mac_key * x).collect();
    let (tags, lm) = deal_masked(&macs, rng);
    let pairs = [0, 1].map(|i| values[i].iter().zip(&tags[i]).map(|(&v, &t)| AuthPair::new(v, t)).collect());
    (pairs, lv, lm)
}

/// Dealer state: the master stream, the MAC key and every mask in the clear.
pub struct Dealer {
    params: RingParams,
    rng: SeededRng,
    mac_key: Option<RingElement>,
    lambdas: BTreeMap<String, Vec<RingElement>>,
}

impl Dealer {
    pub fn new(params: RingParams, seed: [u8; 32]) -> Self {
        Dealer { params, rng: SeededRng::new(seed), mac_key: None, lambdas: BTreeMap::new() }
    }

    pub fn params(&self) -> RingParams {
        self.params
    }

    pub fn rng(&mut self) -> &mut SeededRng {
        &mut self.rng
    }

    /// The MAC key in the clear; `None` before `gen_mac_key`.
    pub fn mac_key(&self) -> Option<RingElement> {
        self.mac_key
    }

    pub fn gen_mac_key(&mut self) -> [MacKeyShare; 2] {
        let mac_key = low_bits(self.params, self.params.s(), &mut self.rng);
        self.mac_key = Some(mac_key);
        let s = share(mac_key, &mut self.rng);
        [
            MacKeyShare { party: PartyId::P0, share: s[0] },
            MacKeyShare { party: PartyId::P1, share: s[1] },
        ]
    }

    /// Fresh uniform masks for a labeled wire vector; the dealer keeps the
    /// plaintext for binding later correlations.
    pub fn gen_rand_offset(&mut self, label: &str, len: usize) -> Result<[Vec<RingElement>; 2]> {
        if self.lambdas.contains_key(label) {
            return Err(Error::config(format!("mask label {label:?} already used")));
        }
        let values: Vec<_> = (0..len).map(|_| fresh(self.params, &mut self.rng)).collect();
        let shares = share_vec(&values, &mut self.rng);
        self.lambdas.insert(label.to_string(), values);
        Ok(shares)
    }

    /// Records dealer-internal masks that never appear on a tape as offsets.
    fn remember(&mut self, label: String, values: Vec<RingElement>) {
        self.lambdas.insert(label, values);
    }

    pub fn lambda(&self, label: &str) -> Option<&[RingElement]> {
        self.lambdas.get(label).map(Vec::as_slice)
    }
}

/// Generates both tapes for `plan` from a 32-byte master seed.
pub fn provision(plan: &ProvisionPlan, seed: [u8; 32]) -> Result<[CorrelationTape; 2]> {
    plan.validate()?;
    let p = plan.params;
    let (m, width) = (plan.m, plan.width());
    let mut d = Dealer::new(p, seed);
    let keys = d.gen_mac_key();
    let mac_key = d.mac_key.unwrap();
    let cursor = Cursor { next_session: 0, enrolled: 0, m: m as u32, n: plan.n as u32 };
    let mut tapes = [
        CorrelationTape::empty(PartyId::P0, p, keys[0], cursor),
        CorrelationTape::empty(PartyId::P1, p, keys[1], cursor),
    ];
    let put_offset = |tapes: &mut [CorrelationTape; 2], label: &str, shares: [Vec<RingElement>; 2]| {
        let [s0, s1] = shares;
        tapes[0].offsets.insert(label.to_string(), s0);
        tapes[1].offsets.insert(label.to_string(), s1);
    };

    // database initialization: lift mac_key and every entry, then mac_key * entry
    let mut init_rng = d.rng.derive("init");
    let key_shares = d.gen_rand_offset("mac_key", 1)?;
    put_offset(&mut tapes, "mac_key", key_shares);
    let lambda_mac = d.lambda("mac_key").unwrap()[0];
    for j in 0..m {
        let label = format!("db[{j}]");
        let shares = d.gen_rand_offset(&label, width + 1)?;
        put_offset(&mut tapes, &label, shares);
        let lambda_db = d.lambda(&label).unwrap().to_vec();
        let mut lambda_mac_db = Vec::with_capacity(width + 1);
        for &ly in &lambda_db {
            let lz = fresh(p, &mut init_rng);
            let [c0, c1] = gen_mult_corr(lambda_mac, ly, lz, &mut init_rng);
            tapes[0].init_mults.push_back(c0);
            tapes[1].init_mults.push_back(c1);
            lambda_mac_db.push(lz);
        }
        d.remember(format!("mac_db[{j}]"), lambda_mac_db);
    }
    push_aux(&mut tapes, gen_maccheck_aux(plan.enroll_batches, mac_key, &mut init_rng));

    for (k, &mode) in plan.sessions.iter().enumerate() {
        let mut rng = d.rng.derive(&format!("session/{k}"));
        let template_label = format!("s{k}/template");
        let shares = d.gen_rand_offset(&template_label, width)?;
        put_offset(&mut tapes, &template_label, shares);
        let lambda_t = d.lambda(&template_label).unwrap().to_vec();
        let db = |d: &Dealer, j: usize| -> (Vec<RingElement>, Vec<RingElement>) {
            (d.lambda(&format!("db[{j}]")).unwrap().to_vec(), d.lambda(&format!("mac_db[{j}]")).unwrap().to_vec())
        };
        let push_secip = |tapes: &mut [CorrelationTape; 2], d: &Dealer, j: usize, lz, lpz, rng: &mut SeededRng| -> Result<()> {
            let (lx, lpx) = db(d, j);
            let [c0, c1] = gen_secip_corr(&lx[1..], &lpx[1..], &lambda_t, lz, lpz, rng)?;
            tapes[0].secips.push_back(c0);
            tapes[1].secips.push_back(c1);
            Ok(())
        };
        let push_cmp = |tapes: &mut [CorrelationTape; 2], lx, lz, lpz, rng: &mut SeededRng| -> Result<()> {
            let [c0, c1] = gen_seccmp_corr(lx, mac_key, lz, lpz, rng)?;
            tapes[0].seccmps.push_back(c0);
            tapes[1].seccmps.push_back(c1);
            Ok(())
        };
        let push_mult = |tapes: &mut [CorrelationTape; 2], lx, ly, rng: &mut SeededRng| -> RingElement {
            let lz = fresh(p, rng);
            let [c0, c1] = gen_mult_corr(lx, ly, lz, rng);
            tapes[0].mults.push_back(c0);
            tapes[1].mults.push_back(c1);
            lz
        };

        match mode {
            Mode::Top1 => {
                let id_label = format!("s{k}/identity");
                let shares = d.gen_rand_offset(&id_label, 1)?;
                put_offset(&mut tapes, &id_label, shares);
                let lambda_ic = d.lambda(&id_label).unwrap()[0];

                let mut scores = Vec::with_capacity(m);
                for j in 0..m {
                    let (lz, lpz) = (fresh(p, &mut rng), fresh(p, &mut rng));
                    push_secip(&mut tapes, &d, j, lz, lpz, &mut rng)?;
                    scores.push((lz, lpz));
                }
                let ids: Vec<_> = (0..m)
                    .map(|j| {
                        let (lx, lpx) = db(&d, j);
                        (lx[0], lpx[0])
                    })
                    .collect();
                let mut best = scores[0];
                let mut best_id = ids[0];
                for i in 1..m {
                    let (lb, lpb) = (fresh(p, &mut rng), fresh(p, &mut rng));
                    push_cmp(&mut tapes, best.0 - scores[i].0, lb, lpb, &mut rng)?;
                    let diffs = [
                        best.0 - scores[i].0,
                        best.1 - scores[i].1,
                        best_id.0 - ids[i].0,
                        best_id.1 - ids[i].1,
                    ];
                    let prods = diffs.map(|ly| push_mult(&mut tapes, lb, ly, &mut rng));
                    best = (scores[i].0 + prods[0], scores[i].1 + prods[1]);
                    best_id = (ids[i].0 + prods[2], ids[i].1 + prods[3]);
                }
                push_mult(&mut tapes, lambda_mac, lambda_ic, &mut rng);
            }
            Mode::Threshold => {
                let (lz, lpz) = (fresh(p, &mut rng), fresh(p, &mut rng));
                for j in 0..m {
                    push_secip(&mut tapes, &d, j, lz, lpz, &mut rng)?;
                }
                let (lb, lpb) = (fresh(p, &mut rng), fresh(p, &mut rng));
                push_cmp(&mut tapes, lz, lb, lpb, &mut rng)?;
            }
        }
        push_aux(&mut tapes, gen_maccheck_aux(1, mac_key, &mut rng));
        let sp = SessionPlan { mode, m: m as u32, n: plan.n as u32 };
        tapes[0].sessions.push(sp);
        tapes[1].sessions.push(sp);
    }
    Ok(tapes)
}

fn push_aux(tapes: &mut [CorrelationTape; 2], aux: [Vec<MacAux>; 2]) {
    let [a0, a1] = aux;
    tapes[0].mac_aux.extend(a0);
    tapes[1].mac_aux.extend(a1);
}

/// Counts of correlations verified by `audit`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub mults: usize,
    pub secips: usize,
    pub seccmps: usize,
    pub mac_aux: usize,
    pub dcf_points: usize,
}

fn audit_fail<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Audit(msg.into()))
}

fn audit_mult(
    c: Option<(&MultCorrelation, &MultCorrelation)>,
    lx: RingElement,
    ly: RingElement,
    what: &str,
    report: &mut AuditReport,
) -> Result<RingElement> {
    let Some((c0, c1)) = c else { return audit_fail(format!("{what}: multiplication missing")) };
    let (a, b) = (c0.a + c1.a, c0.b + c1.b);
    if a * b != c0.c + c1.c {
        return audit_fail(format!("{what}: triple relation"));
    }
    if c0.delta_x != c1.delta_x || c0.delta_y != c1.delta_y {
        return audit_fail(format!("{what}: public deltas differ"));
    }
    if c0.delta_x != a - lx || c0.delta_y != b - ly {
        return audit_fail(format!("{what}: deltas not bound to input masks"));
    }
    report.mults += 1;
    Ok(c0.lambda_z + c1.lambda_z)
}

fn audit_secip(
    c: Option<(&SecIpCorrelation, &SecIpCorrelation)>,
    lx: &[RingElement],
    lpx: &[RingElement],
    ly: &[RingElement],
    report: &mut AuditReport,
) -> Result<(RingElement, RingElement)> {
    let Some((c0, c1)) = c else { return audit_fail("inner product correlation missing") };
    if c0.n() != ly.len() || c1.n() != ly.len() {
        return audit_fail("inner product correlation length");
    }
    for i in 0..ly.len() {
        let (a1, a2, b) = (c0.a1[i] + c1.a1[i], c0.a2[i] + c1.a2[i], c0.b[i] + c1.b[i]);
        if a1 * b != c0.c1[i] + c1.c1[i] || a2 * b != c0.c2[i] + c1.c2[i] {
            return audit_fail("inner product triple relation");
        }
        if c0.delta_x[i] != c1.delta_x[i] || c0.delta_mac_x[i] != c1.delta_mac_x[i] || c0.delta_y[i] != c1.delta_y[i] {
            return audit_fail("inner product public deltas differ");
        }
        if c0.delta_x[i] != a1 - lx[i] || c0.delta_mac_x[i] != a2 - lpx[i] || c0.delta_y[i] != b - ly[i] {
            return audit_fail("inner product deltas not bound to input masks");
        }
    }
    report.secips += 1;
    Ok((c0.lambda_z + c1.lambda_z, c0.lambda_mac_z + c1.lambda_mac_z))
}

fn audit_cmp(
    c: Option<(&SecCmpCorrelation, &SecCmpCorrelation)>,
    lx: RingElement,
    mac_key: RingElement,
    rng: &mut SeededRng,
    report: &mut AuditReport,
) -> Result<(RingElement, RingElement)> {
    let Some((c0, c1)) = c else { return audit_fail("comparison correlation missing") };
    let p = lx.params();
    if c0.b0 + c1.b0 != p.one() || c0.b1 + c1.b1 != mac_key {
        return audit_fail("comparison payload shares");
    }
    let payload = Payload2::new(-p.one(), -mac_key);
    let mut points = vec![lx, p.element(rng.next_u128()), p.element(rng.next_u128())];
    if !lx.is_zero() {
        points.push(lx - p.one());
    }
    for x in points {
        let expect = if x.value() < lx.value() { payload } else { Payload2::zero(p) };
        let got = eval_lt(PartyId::P0, &c0.key, x)? + eval_lt(PartyId::P1, &c1.key, x)?;
        if got != expect {
            return audit_fail(format!("DCF key pair wrong at {x}"));
        }
        report.dcf_points += 1;
    }
    report.seccmps += 1;
    Ok((c0.lambda_z + c1.lambda_z, c0.lambda_mac_z + c1.lambda_mac_z))
}

/// Re-derives every mask from both fresh tapes and checks all algebraic
/// relations, replaying the wire graph the online phase will follow.
pub fn audit(tapes: &[CorrelationTape; 2], seed: u64) -> Result<AuditReport> {
    let [t0, t1] = tapes;
    if t0.party != PartyId::P0 || t1.party != PartyId::P1 {
        return audit_fail("tapes must belong to parties 0 and 1");
    }
    if t0.params != t1.params || t0.cursor != t1.cursor || t0.sessions != t1.sessions {
        return audit_fail("tape headers disagree");
    }
    if t0.cursor.next_session != 0 || t0.cursor.enrolled != 0 {
        return audit_fail("audit needs unconsumed tapes");
    }
    let p = t0.params;
    let mut report = AuditReport::default();
    let mut rng = SeededRng::from_u64(seed);
    let mac_key = t0.key_share.share + t1.key_share.share;
    if mac_key.value() >> p.s() != 0 {
        return audit_fail("MAC key exceeds 2^s");
    }
    let offset = |label: &str| -> Result<Vec<RingElement>> {
        let (a, b) = (t0.offset(label)?, t1.offset(label)?);
        if a.len() != b.len() {
            return audit_fail(format!("mask {label} has unequal lengths"));
        }
        Ok(a.iter().zip(b).map(|(&x, &y)| x + y).collect())
    };
    let (m, width) = (t0.cursor.m as usize, t0.cursor.n as usize + 1);

    let lambda_mac = offset("mac_key")?[0];
    if t0.init_mults.len() != m * (width + 1) || t1.init_mults.len() != t0.init_mults.len() {
        return audit_fail("initialization multiplications not sized m * (n + 2)");
    }
    let mut init = t0.init_mults.iter().zip(&t1.init_mults);
    let mut db = Vec::with_capacity(m);
    for j in 0..m {
        let lx = offset(&format!("db[{j}]"))?;
        if lx.len() != width + 1 {
            return audit_fail(format!("db[{j}] mask width"));
        }
        let mut lpx = Vec::with_capacity(width + 1);
        for &ly in &lx {
            lpx.push(audit_mult(init.next(), lambda_mac, ly, "initialization", &mut report)?);
        }
        db.push((lx, lpx));
    }

    if t0.mac_aux.len() != t1.mac_aux.len() {
        return audit_fail("MAC auxiliary counts differ");
    }
    for (a, b) in t0.mac_aux.iter().zip(&t1.mac_aux) {
        let r = a.r + b.r;
        if r.value() >> p.s() != 0 || a.keyed_r + b.keyed_r != mac_key * p.two_pow_l() * r {
            return audit_fail("MAC auxiliary relation");
        }
        report.mac_aux += 1;
    }

    let mut secips = t0.secips.iter().zip(&t1.secips);
    let mut cmps = t0.seccmps.iter().zip(&t1.seccmps);
    let mut mults = t0.mults.iter().zip(&t1.mults);
    for (k, plan) in t0.sessions.iter().enumerate() {
        if plan.m as usize != m || plan.n as usize + 1 != width {
            return audit_fail(format!("session {k} shape differs from the database"));
        }
        let lt = offset(&format!("s{k}/template"))?;
        match plan.mode {
            Mode::Top1 => {
                let lic = offset(&format!("s{k}/identity"))?[0];
                let mut scores = Vec::with_capacity(m);
                for (lx, lpx) in &db {
                    scores.push(audit_secip(secips.next(), &lx[1..], &lpx[1..], &lt, &mut report)?);
                }
                let mut best = scores[0];
                let mut best_id = (db[0].0[0], db[0].1[0]);
                for i in 1..m {
                    let (lb, _) = audit_cmp(cmps.next(), best.0 - scores[i].0, mac_key, &mut rng, &mut report)?;
                    let id = (db[i].0[0], db[i].1[0]);
                    let diffs = [best.0 - scores[i].0, best.1 - scores[i].1, best_id.0 - id.0, best_id.1 - id.1];
                    let mut prods = [p.zero(); 4];
                    for (slot, ly) in prods.iter_mut().zip(diffs) {
                        *slot = audit_mult(mults.next(), lb, ly, "selection", &mut report)?;
                    }
                    best = (scores[i].0 + prods[0], scores[i].1 + prods[1]);
                    best_id = (id.0 + prods[2], id.1 + prods[3]);
                }
                audit_mult(mults.next(), lambda_mac, lic, "identity match", &mut report)?;
            }
            Mode::Threshold => {
                let mut shared = None;
                for (lx, lpx) in &db {
                    let out = audit_secip(secips.next(), &lx[1..], &lpx[1..], &lt, &mut report)?;
                    if *shared.get_or_insert(out) != out {
                        return audit_fail("threshold session scores must share one output mask");
                    }
                }
                audit_cmp(cmps.next(), shared.unwrap().0, mac_key, &mut rng, &mut report)?;
            }
        }
    }
    if secips.next().is_some() || cmps.next().is_some() || mults.next().is_some() {
        return audit_fail("tape carries unplanned correlations");
    }
    Ok(report)
}
