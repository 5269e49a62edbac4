//! Server runtime and verifier.
//!
//! A server owns one party's tape and the authenticated database. Results
//! leave the server as frames: RESULT carries the masked share of `residual`,
//! a CONTROL abort carries the reason code.

use std::path::Path;

use crate::client::Request;
use crate::dealer::{read_tape, write_tape, CorrelationTape};
use crate::error::{AbortReason, Error, Result};
use crate::protocols::{AuthRequest, Mode, Session};
use crate::ring::{RingElement, RingParams, SeededRng, ELEMENT_BYTES};
use crate::shares::{AuthPair, OptShare, PartyId};
use crate::tape::{ByteReader, ByteWriter, TapeError};
use crate::transport::{Channel, ChannelMetrics, Frame, MsgType, CONTROL_HELLO};

pub use crate::protocols::{FaultPlan, FaultTarget};

const KIND_ENROLL: u8 = 1;
const KIND_AUTH: u8 = 2;
const ENROLL_SESSION_BIT: u32 = 1 << 31;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DbEntry {
    pub identity: AuthPair,
    pub template: Vec<AuthPair>,
}

/// One party's authenticated reference database.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateDb {
    pub params: RingParams,
    /// Raw template dimension; stored templates have `n + 1` entries.
    pub n: u32,
    /// The lifted MAC key, present once the first entry is enrolled.
    pub mac_key: Option<OptShare>,
    pub entries: Vec<DbEntry>,
}

impl TemplateDb {
    pub fn new(params: RingParams, n: u32) -> Self {
        TemplateDb { params, n, mac_key: None, entries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn width(&self) -> usize {
        self.n as usize + 1
    }

    pub fn write(&self, w: &mut ByteWriter) {
        w.u32(self.n);
        match &self.mac_key {
            Some(mac_key) => {
                w.u8(1);
                w.bytes(&mac_key.to_bytes());
            }
            None => w.u8(0),
        }
        w.u32(self.entries.len() as u32);
        for e in &self.entries {
            w.bytes(&e.identity.to_bytes());
            for t in &e.template {
                w.bytes(&t.to_bytes());
            }
        }
    }

    pub fn read(r: &mut ByteReader, party: PartyId, params: RingParams) -> Result<TemplateDb, TapeError> {
        let bad = |e: Error| TapeError::Malformed(format!("database: {e}"));
        let n = r.u32()?;
        let mut db = TemplateDb::new(params, n);
        if r.u8()? == 1 {
            db.mac_key = Some(OptShare::from_bytes(party, params, r.take(2 * ELEMENT_BYTES)?).map_err(bad)?);
        }
        let count = r.u32()? as usize;
        let entry_bytes = (db.width() + 1) * AuthPair::BYTES;
        if count.saturating_mul(entry_bytes) > r.remaining() {
            return Err(TapeError::Truncated);
        }
        for _ in 0..count {
            let mut pairs = (0..=db.width())
                .map(|_| AuthPair::from_bytes(party, params, r.take(AuthPair::BYTES)?).map_err(bad))
                .collect::<Result<Vec<_>, TapeError>>()?;
            let template = pairs.split_off(1);
            db.entries.push(DbEntry { identity: pairs[0], template });
        }
        Ok(db)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Done,
    Aborted,
}

/// One party's result of a session, as handed to the verifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResultShare {
    Residual { delta: RingElement, lambda: RingElement },
    Abort(AbortReason),
}

impl ResultShare {
    pub fn to_frame(&self, session_id: u32) -> Frame {
        match self {
            ResultShare::Residual { delta, lambda } => {
                let mut payload = delta.to_le_bytes().to_vec();
                payload.extend_from_slice(&lambda.to_le_bytes());
                Frame::new(MsgType::Result, session_id, payload)
            }
            ResultShare::Abort(reason) => Frame::abort(session_id, reason.code()),
        }
    }

    pub fn from_frame(frame: &Frame, params: RingParams) -> Result<ResultShare> {
        if let Some(code) = frame.abort_code() {
            let reason = AbortReason::from_code(code).ok_or_else(|| Error::Decode(format!("abort code {code}")))?;
            return Ok(ResultShare::Abort(reason));
        }
        if frame.msg_type != MsgType::Result || frame.payload.len() != 2 * ELEMENT_BYTES {
            return Err(Error::Decode("not a result frame".into()));
        }
        Ok(ResultShare::Residual {
            delta: params.decode_element(&frame.payload[..ELEMENT_BYTES])?,
            lambda: params.decode_element(&frame.payload[ELEMENT_BYTES..])?,
        })
    }

    pub fn to_bytes(&self, session_id: u32) -> Vec<u8> {
        self.to_frame(session_id).encode().expect("result frames are small")
    }

    pub fn from_bytes(bytes: &[u8], params: RingParams) -> Result<(u32, ResultShare)> {
        let frame = Frame::decode(bytes)?;
        Ok((frame.session_id, ResultShare::from_frame(&frame, params)?))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SessionOutcome {
    pub session_id: u32,
    pub mode: Mode,
    pub phase: Phase,
    pub result: ResultShare,
    pub metrics: ChannelMetrics,
    pub transcript: Option<[u8; 32]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Grant,
    Deny,
    Abort,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Decision {
    pub outcome: Outcome,
    /// The reconstructed `residual`, absent on abort.
    pub residual: Option<i128>,
    pub reason: Option<AbortReason>,
}

impl Decision {
    fn abort(reason: Option<AbortReason>) -> Decision {
        Decision { outcome: Outcome::Abort, residual: None, reason }
    }
}

/// Joins the two result shares: any abort or disagreement on the public
/// delta aborts; otherwise grant iff `residual` is zero.
pub fn decide(r0: &ResultShare, r1: &ResultShare) -> Decision {
    match (r0, r1) {
        (ResultShare::Abort(a), _) | (_, ResultShare::Abort(a)) => Decision::abort(Some(*a)),
        (ResultShare::Residual { delta: d0, lambda: l0 }, ResultShare::Residual { delta: d1, lambda: l1 }) => {
            if d0 != d1 {
                return Decision::abort(None);
            }
            let residual = (*d0 - *l0 - *l1).to_signed_l();
            let outcome = if residual == 0 { Outcome::Grant } else { Outcome::Deny };
            Decision { outcome, residual: Some(residual), reason: None }
        }
    }
}

/// Public session parameters both servers must agree on before any
/// correlation is used.
fn handshake(ch: &mut Channel, session_id: u32, fields: &[u8]) -> Result<()> {
    let mut payload = vec![CONTROL_HELLO];
    payload.extend_from_slice(fields);
    let peer = ch.exchange(Frame::new(MsgType::Control, session_id, payload.clone()))?;
    if peer.payload != payload {
        return Err(Error::Protocol("servers disagree on session parameters".into()));
    }
    Ok(())
}

pub struct Server {
    pub party: PartyId,
    pub tape: CorrelationTape,
    rng: SeededRng,
    faults: Vec<FaultPlan>,
    record_transcripts: bool,
}

impl Server {
    pub fn new(tape: CorrelationTape, seed: [u8; 32]) -> Self {
        Server { party: tape.party, tape, rng: SeededRng::new(seed), faults: Vec::new(), record_transcripts: false }
    }

    pub fn load(path: &Path, seed: [u8; 32]) -> Result<Self> {
        Ok(Server::new(read_tape(path)?, seed))
    }

    /// Persists the remaining tape together with the database.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_tape(&self.tape, path)
    }

    pub fn params(&self) -> RingParams {
        self.tape.params
    }

    pub fn db(&self) -> Option<&TemplateDb> {
        self.tape.db.as_ref()
    }

    pub fn set_faults(&mut self, faults: Vec<FaultPlan>) {
        self.faults = faults;
    }

    /// Records a digest of every frame of each following session.
    pub fn record_transcripts(&mut self, on: bool) {
        self.record_transcripts = on;
    }

    /// Authenticates new entries (identity share followed by `n + 1`
    /// template shares each) and appends them to the database.
    pub fn enroll(&mut self, ch: &mut Channel, entries: &[Vec<RingElement>]) -> Result<()> {
        let params = self.params();
        let n = self.tape.cursor.n;
        let width = n as usize + 1;
        if let Some(bad) = entries.iter().find(|e| e.len() != width + 1) {
            return Err(Error::config(format!("entry has {} shares, expected {}", bad.len(), width + 1)));
        }
        let enroll = self.tape.take_enrollment(entries.len())?;
        let session_id = ENROLL_SESSION_BIT | enroll.first;
        let mut fields = vec![KIND_ENROLL];
        fields.extend_from_slice(&n.to_le_bytes());
        fields.extend_from_slice(&enroll.first.to_le_bytes());
        fields.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        handshake(ch, session_id, &fields)?;

        let mut db = self.tape.db.take().unwrap_or_else(|| TemplateDb::new(params, n));
        let rng = self.rng.derive(&format!("enroll/{}", enroll.first));
        let mut session = Session::new(self.party, params, session_id, ch, rng).with_faults(self.faults.clone());
        let result = session
            .initialize_db(entries, &enroll.entry_lambdas, db.mac_key, &self.tape.key_share, enroll.key_lambda, enroll.init)
            .and_then(|(mac_key, added)| {
                session.mac_check(&self.tape.key_share, enroll.mac_aux)?;
                Ok((mac_key, added))
            });
        match result {
            Ok((mac_key, added)) => {
                db.mac_key = Some(mac_key);
                for mut pairs in added {
                    let template = pairs.split_off(1);
                    db.entries.push(DbEntry { identity: pairs[0], template });
                }
                self.tape.db = Some(db);
                Ok(())
            }
            Err(e) => {
                self.tape.db = Some(db);
                notify_peer(session.channel(), session_id, &e);
                Err(e)
            }
        }
    }

    /// Runs the next provisioned authentication session. Detected
    /// misbehavior yields an aborted outcome; other failures are errors.
    pub fn run_session(&mut self, ch: &mut Channel, request: &AuthRequest, metric: u8) -> Result<SessionOutcome> {
        let db = self.tape.db.take().ok_or_else(|| Error::config("no database enrolled"))?;
        let result = self.run_session_with(ch, &db, request, metric);
        self.tape.db = Some(db);
        result
    }

    fn run_session_with(
        &mut self,
        ch: &mut Channel,
        db: &TemplateDb,
        request: &AuthRequest,
        metric: u8,
    ) -> Result<SessionOutcome> {
        let params = self.params();
        let session_tape = self.tape.take_session()?;
        let session_id = session_tape.index;
        ch.reset_metrics();
        if self.record_transcripts {
            ch.record_transcript();
        }
        let mut fields = vec![KIND_AUTH, request.mode.code(), metric];
        fields.extend_from_slice(&db.n.to_le_bytes());
        fields.extend_from_slice(&(db.len() as u32).to_le_bytes());
        fields.extend_from_slice(&request.entry.to_le_bytes());
        fields.extend_from_slice(&request.tau.to_le_bytes());
        handshake(ch, session_id, &fields)?;

        let rng = self.rng.derive(&format!("session/{session_id}"));
        let mut session = Session::new(self.party, params, session_id, ch, rng).with_faults(self.faults.clone());
        let outcome = session.authenticate(db, request, session_tape, &self.tape.key_share);
        let (phase, result) = match outcome {
            Ok(d) => (Phase::Done, ResultShare::Residual { delta: d.residual.value.delta, lambda: d.residual.value.lambda }),
            Err(Error::Abort(reason)) => {
                notify_peer(session.channel(), session_id, &Error::Abort(reason));
                (Phase::Aborted, ResultShare::Abort(reason))
            }
            Err(e) => {
                notify_peer(session.channel(), session_id, &e);
                return Err(e);
            }
        };
        let metrics = session.metrics();
        Ok(SessionOutcome {
            session_id,
            mode: request.mode,
            phase,
            result,
            metrics,
            transcript: ch.transcript_digest(),
        })
    }
}

/// Builds a server-side request from a client request.
pub fn auth_request(req: &Request, mode: Mode, entry: u32, tau: RingElement) -> AuthRequest {
    AuthRequest { mode, template: req.shares.clone(), identity: req.identity, entry, tau }
}

fn join<T>(r: std::thread::Result<T>) -> T {
    r.unwrap_or_else(|p| std::panic::resume_unwind(p))
}

/// Both servers of one deployment driven from a single process.
pub struct Deployment {
    pub servers: [Server; 2],
}

impl Deployment {
    pub fn new(tapes: [CorrelationTape; 2], seed: [u8; 32]) -> Self {
        let root = SeededRng::new(seed);
        let [t0, t1] = tapes;
        Deployment {
            servers: [Server::new(t0, root.derive("server/0").seed()), Server::new(t1, root.derive("server/1").seed())],
        }
    }

    pub fn params(&self) -> RingParams {
        self.servers[0].params()
    }

    /// Enrolls one batch of registration requests over the given channels.
    pub fn enroll_with(&mut self, channels: [&mut Channel; 2], requests: &[[Request; 2]]) -> Result<()> {
        let [s0, s1] = &mut self.servers;
        let [c0, c1] = channels;
        let e0: Vec<_> = requests.iter().map(|r| r[0].entry()).collect();
        let e1: Vec<_> = requests.iter().map(|r| r[1].entry()).collect();
        let (r0, r1) = std::thread::scope(|scope| {
            let h = scope.spawn(move || s1.enroll(c1, &e1));
            let r0 = s0.enroll(c0, &e0);
            (r0, join(h.join()))
        });
        r0.and(r1)
    }

    pub fn enroll(&mut self, requests: &[[Request; 2]]) -> Result<()> {
        let (mut c0, mut c1) = Channel::in_process_pair();
        self.enroll_with([&mut c0, &mut c1], requests)
    }

    /// Runs the next session over the given channels and lets the verifier decide.
    pub fn authenticate_with(
        &mut self,
        channels: [&mut Channel; 2],
        requests: &[Request; 2],
        mode: Mode,
        entry: u32,
        tau: RingElement,
    ) -> Result<(Decision, [SessionOutcome; 2])> {
        let [s0, s1] = &mut self.servers;
        let [c0, c1] = channels;
        let (m0, m1) = (requests[0].metric.code(), requests[1].metric.code());
        let (q0, q1) = (auth_request(&requests[0], mode, entry, tau), auth_request(&requests[1], mode, entry, tau));
        let (r0, r1) = std::thread::scope(|scope| {
            let h = scope.spawn(move || s1.run_session(c1, &q1, m1));
            let r0 = s0.run_session(c0, &q0, m0);
            (r0, join(h.join()))
        });
        let outcomes = [r0?, r1?];
        Ok((decide(&outcomes[0].result, &outcomes[1].result), outcomes))
    }

    /// Runs the next session on a fresh in-process channel pair.
    pub fn authenticate(
        &mut self,
        requests: &[Request; 2],
        mode: Mode,
        entry: u32,
        tau: RingElement,
    ) -> Result<(Decision, [SessionOutcome; 2])> {
        let (mut c0, mut c1) = Channel::in_process_pair();
        self.authenticate_with([&mut c0, &mut c1], requests, mode, entry, tau)
    }
}

/// Tells the peer to stop waiting; a peer that already aborted is not told.
fn notify_peer(ch: &mut Channel, session_id: u32, e: &Error) {
    match e {
        Error::Abort(AbortReason::PeerAbort) => {}
        Error::Abort(reason) => ch.send_abort(session_id, reason.code()),
        _ => ch.send_abort(session_id, AbortReason::PeerAbort.code()),
    }
}
