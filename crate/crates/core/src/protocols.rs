//! Online two-party protocols over masked shares.
//!
//! Every opened masked value goes into the session view digest, and every
//! opened authenticated pair goes into the open log checked by `mac_check`.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::dealer::{MacAux, MultCorrelation, SecCmpCorrelation, SecIpCorrelation};
use crate::error::{AbortReason, Error, Result};
use crate::fss::eval_lt;
use crate::node::TemplateDb;
use crate::ring::{encode_elements, RingElement, RingParams, SeededRng, ELEMENT_BYTES};
use crate::shares::{AuthPair, MacKeyShare, OptShare, PartyId};
use crate::transport::{Channel, ChannelMetrics, Frame, MsgType, TransportError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Top1,
    Threshold,
}

impl Mode {
    pub fn code(self) -> u8 {
        match self {
            Mode::Top1 => 0,
            Mode::Threshold => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Mode> {
        match code {
            0 => Some(Mode::Top1),
            1 => Some(Mode::Threshold),
            _ => None,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Top1 => "top1",
            Mode::Threshold => "threshold",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "top1" => Ok(Mode::Top1),
            "threshold" => Ok(Mode::Threshold),
            _ => Err(Error::config(format!("unknown mode {s:?} (expected top1 or threshold)"))),
        }
    }
}

/// Where an injected additive error lands.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FaultTarget {
    /// The outgoing share of an opened value; the sender's own view is untouched.
    OpenDelta,
    /// The share sent for the MAC-check combination `y0`.
    Y0Share,
    /// The MAC-check output share, before it is committed.
    ZShare,
    /// This party's DCF evaluation output in a comparison.
    ComparisonPayload,
    /// The product share `c` of a multiplication or inner product correlation.
    TripleShare,
    /// An opened authenticated value, shifted in the sender's view as well.
    OpenConsistent,
}

impl FaultTarget {
    pub const ALL: [FaultTarget; 6] = [
        FaultTarget::OpenDelta,
        FaultTarget::Y0Share,
        FaultTarget::ZShare,
        FaultTarget::ComparisonPayload,
        FaultTarget::TripleShare,
        FaultTarget::OpenConsistent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FaultTarget::OpenDelta => "open-delta",
            FaultTarget::Y0Share => "y0-share",
            FaultTarget::ZShare => "z-share",
            FaultTarget::ComparisonPayload => "comparison-payload",
            FaultTarget::TripleShare => "triple-share",
            FaultTarget::OpenConsistent => "open-consistent",
        }
    }
}

impl fmt::Display for FaultTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FaultTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<FaultTarget> {
        FaultTarget::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::config(format!("unknown fault target {s:?}")))
    }
}

/// A single additive error injected by one party during a session.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FaultPlan {
    pub target: FaultTarget,
    pub index: usize,
    pub error: i128,
    pub party: PartyId,
}

impl FaultPlan {
    /// Parses `target:index:+e` or `target:index:-e`.
    pub fn parse(text: &str, party: PartyId) -> Result<FaultPlan> {
        let parts: Vec<&str> = text.split(':').collect();
        let [target, index, error] = parts.as_slice() else {
            return Err(Error::config(format!("fault {text:?} is not target:index:error")));
        };
        let index = index.parse().map_err(|_| Error::config(format!("bad fault index {index:?}")))?;
        let error: i128 = error
            .trim_start_matches('+')
            .parse()
            .map_err(|_| Error::config(format!("bad fault error {error:?}")))?;
        if error == 0 {
            return Err(Error::config("fault error must be nonzero"));
        }
        Ok(FaultPlan { target: target.parse()?, index, error, party })
    }

    fn error_in(&self, params: RingParams) -> Result<RingElement> {
        let e = params.from_signed(self.error);
        if e.is_zero() {
            return Err(Error::config("fault error vanishes in the ring"));
        }
        Ok(e)
    }
}

/// Opened authenticated pairs awaiting a MAC check.
#[derive(Clone, Debug, Default)]
pub struct OpenLog {
    entries: Vec<AuthPair>,
}

impl OpenLog {
    pub fn push(&mut self, pair: AuthPair) {
        self.entries.push(pair);
    }

    pub fn extend(&mut self, pairs: impl IntoIterator<Item = AuthPair>) {
        self.entries.extend(pairs);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[AuthPair] {
        &self.entries
    }
}

/// Per-session event counters used to address fault injections.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SessionShape {
    pub opens: usize,
    pub auth_opens: usize,
    pub compares: usize,
    pub correlations: usize,
}

impl SessionShape {
    /// Event counts of an honest authentication session.
    pub fn authentication(mode: Mode, m: usize, n: usize) -> SessionShape {
        let width = n + 1;
        match mode {
            Mode::Top1 => {
                let auth_opens = 2 * m + (m - 1) * 6 + 1;
                SessionShape {
                    opens: width + 1 + auth_opens,
                    auth_opens,
                    compares: m - 1,
                    correlations: m + 4 * (m - 1) + 1,
                }
            }
            Mode::Threshold => SessionShape { opens: width + 4, auth_opens: 4, compares: 1, correlations: 1 },
        }
    }
}

/// One party's correlations for one authentication session.
#[derive(Clone, Debug)]
pub struct SessionTape {
    pub index: u32,
    pub mode: Mode,
    pub template_lambda: Vec<RingElement>,
    pub identity_lambda: Option<RingElement>,
    pub secips: VecDeque<SecIpCorrelation>,
    pub seccmps: VecDeque<SecCmpCorrelation>,
    pub mults: VecDeque<MultCorrelation>,
    pub mac_aux: MacAux,
}

impl SessionTape {
    fn pop_secip(&mut self) -> Result<SecIpCorrelation> {
        self.secips.pop_front().ok_or(Error::CorrelationExhausted("inner product"))
    }

    fn pop_seccmp(&mut self) -> Result<SecCmpCorrelation> {
        self.seccmps.pop_front().ok_or(Error::CorrelationExhausted("comparison"))
    }

    fn pop_mult(&mut self) -> Result<MultCorrelation> {
        self.mults.pop_front().ok_or(Error::CorrelationExhausted("multiplication"))
    }
}

/// What one server contributes to an authentication session.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuthRequest {
    pub mode: Mode,
    /// Additive share of the preprocessed template (length n + 1).
    pub template: Vec<RingElement>,
    /// Additive share of the claimed identity.
    pub identity: RingElement,
    /// Database entry compared against in threshold mode.
    pub entry: u32,
    pub tau: RingElement,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuthDecision {
    pub residual: AuthPair,
    pub mode: Mode,
    pub metrics: ChannelMetrics,
}

fn hash_commit(value: &[u8], nonce: &[u8; 32]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(value);
    h.update(nonce);
    h.finalize().into()
}

fn abort(reason: AbortReason) -> Error {
    Error::Abort(reason)
}

fn transport(e: TransportError) -> Error {
    match e {
        TransportError::PeerAbort(_) => Error::Abort(AbortReason::PeerAbort),
        other => Error::Transport(other),
    }
}

/// This party's share of `x * y` before opening. Only party 0 adds the
/// public cross term.
pub fn mult_share(party: PartyId, x: &OptShare, y: &OptShare, c: &MultCorrelation) -> RingElement {
    let ex = x.delta + c.delta_x;
    let ey = y.delta + c.delta_y;
    let mut z = c.c - c.a * ey - ex * c.b + c.lambda_z;
    if party.is_leader() {
        z += ex * ey;
    }
    z
}

/// This party's shares of `sum d[i] * t[i]` and `sum mac_key d[i] * t[i]`.
pub fn inner_product_shares(
    party: PartyId,
    d: &[AuthPair],
    t: &[OptShare],
    c: &SecIpCorrelation,
) -> (RingElement, RingElement) {
    let mut z = c.lambda_z;
    let mut mac_z = c.lambda_mac_z;
    for i in 0..t.len() {
        let ey = t[i].delta + c.delta_y[i];
        let ex = d[i].value.delta + c.delta_x[i];
        let epx = d[i].mac.delta + c.delta_mac_x[i];
        z += c.c1[i] - c.a1[i] * ey - ex * c.b[i];
        mac_z += c.c2[i] - c.a2[i] * ey - epx * c.b[i];
        if party.is_leader() {
            z += ex * ey;
            mac_z += epx * ey;
        }
    }
    (z, mac_z)
}

/// One party's state for a run of online protocol steps over one channel.
pub struct Session<'c> {
    pub party: PartyId,
    pub params: RingParams,
    pub session_id: u32,
    ch: &'c mut Channel,
    pub log: OpenLog,
    view: Sha256,
    rng: SeededRng,
    faults: Vec<FaultPlan>,
    events: SessionShape,
}

impl<'c> Session<'c> {
    pub fn new(party: PartyId, params: RingParams, session_id: u32, ch: &'c mut Channel, rng: SeededRng) -> Self {
        Session {
            party,
            params,
            session_id,
            ch,
            log: OpenLog::default(),
            view: Sha256::new(),
            rng,
            faults: Vec::new(),
            events: SessionShape::default(),
        }
    }

    /// Arms the faults that target this party.
    pub fn with_faults(mut self, faults: impl IntoIterator<Item = FaultPlan>) -> Self {
        let party = self.party;
        self.faults = faults.into_iter().filter(|f| f.party == party).collect();
        self
    }

    pub fn channel(&mut self) -> &mut Channel {
        self.ch
    }

    pub fn metrics(&self) -> ChannelMetrics {
        self.ch.snapshot_metrics()
    }

    /// Counts of fault-addressable events so far.
    pub fn events(&self) -> SessionShape {
        self.events
    }

    pub fn view_digest(&self) -> [u8; 32] {
        self.view.clone().finalize().into()
    }

    fn fault_for(&self, target: FaultTarget) -> Vec<(usize, RingElement)> {
        self.faults
            .iter()
            .filter(|f| f.target == target)
            .filter_map(|f| Some((f.index, f.error_in(self.params).ok()?)))
            .collect()
    }

    fn exchange(&mut self, frame: Frame) -> Result<Frame> {
        self.ch.exchange(frame).map_err(transport)
    }

    /// Swaps shares and returns the opened values as seen by this party.
    fn open(&mut self, shares: &[RingElement], authenticated: bool) -> Result<Vec<RingElement>> {
        let mut own = shares.to_vec();
        let mut outgoing = shares.to_vec();
        for (i, e) in self.fault_for(FaultTarget::OpenDelta) {
            if (self.events.opens..self.events.opens + own.len()).contains(&i) {
                outgoing[i - self.events.opens] += e;
            }
        }
        if authenticated {
            for (i, e) in self.fault_for(FaultTarget::OpenConsistent) {
                let start = self.events.auth_opens;
                if (start..start + own.len()).contains(&i) {
                    outgoing[i - start] += e;
                    own[i - start] += e;
                }
            }
            self.events.auth_opens += own.len();
        }
        self.events.opens += own.len();
        let peer = match self.ch.swap_values(MsgType::Open, self.session_id, self.params, &outgoing) {
            Ok(v) => v,
            Err(Error::Transport(e)) => return Err(transport(e)),
            Err(e) => return Err(e),
        };
        let opened: Vec<RingElement> = own.iter().zip(peer).map(|(&a, b)| a + b).collect();
        for v in &opened {
            self.view.update(v.to_le_bytes());
        }
        Ok(opened)
    }

    fn tamper_correlation(&mut self) -> Option<RingElement> {
        let at = self.events.correlations;
        self.events.correlations += 1;
        let hits = self.fault_for(FaultTarget::TripleShare).into_iter().filter(|&(i, _)| i == at);
        hits.map(|(_, e)| e).reduce(|a, b| a + b)
    }

    /// Turns additive shares into masked shares under dealer masks `lambda`,
    /// one round for the whole vector.
    pub fn lift_to_optss(&mut self, x: &[RingElement], lambda: &[RingElement]) -> Result<Vec<OptShare>> {
        if x.len() != lambda.len() {
            return Err(Error::Protocol("lift: input and mask lengths differ".into()));
        }
        let masked: Vec<RingElement> = x.iter().zip(lambda).map(|(&a, &l)| a + l).collect();
        let deltas = self.open(&masked, false)?;
        Ok(deltas.into_iter().zip(lambda).map(|(d, &l)| OptShare::new(self.party, d, l)).collect())
    }

    /// Multiplies each pair in one round.
    pub fn mult_batch(&mut self, pairs: &[(OptShare, OptShare)], corrs: Vec<MultCorrelation>) -> Result<Vec<OptShare>> {
        self.mult_batch_inner(pairs, corrs, true)
    }

    fn mult_batch_inner(
        &mut self,
        pairs: &[(OptShare, OptShare)],
        mut corrs: Vec<MultCorrelation>,
        authenticated: bool,
    ) -> Result<Vec<OptShare>> {
        if pairs.len() != corrs.len() {
            return Err(Error::CorrelationExhausted("multiplication"));
        }
        let mut shares = Vec::with_capacity(pairs.len());
        for ((x, y), c) in pairs.iter().zip(corrs.iter_mut()) {
            if let Some(e) = self.tamper_correlation() {
                c.c += e;
            }
            shares.push(mult_share(self.party, x, y, c));
        }
        let deltas = self.open(&shares, authenticated)?;
        Ok(deltas.into_iter().zip(&corrs).map(|(d, c)| OptShare::new(self.party, d, c.lambda_z)).collect())
    }

    pub fn mult(&mut self, x: &OptShare, y: &OptShare, corr: MultCorrelation) -> Result<OptShare> {
        Ok(self.mult_batch(&[(*x, *y)], vec![corr])?[0])
    }

    /// Inner products of authenticated vectors with masked vectors; all
    /// results open together in one round of two elements each.
    pub fn secure_inner_product_batch(
        &mut self,
        jobs: &[(&[AuthPair], &[OptShare])],
        corrs: Vec<SecIpCorrelation>,
    ) -> Result<Vec<AuthPair>> {
        if jobs.len() != corrs.len() {
            return Err(Error::CorrelationExhausted("inner product"));
        }
        let mut shares = Vec::with_capacity(2 * jobs.len());
        for ((d, t), c) in jobs.iter().zip(&corrs) {
            if d.len() != t.len() {
                return Err(Error::Protocol(format!("inner product over lengths {} and {}", d.len(), t.len())));
            }
            if c.n() != t.len() {
                return Err(Error::config("inner product correlation has the wrong length"));
            }
            let (mut z, mac_z) = inner_product_shares(self.party, d, t, c);
            if let Some(e) = self.tamper_correlation() {
                z += e;
            }
            shares.push(z);
            shares.push(mac_z);
        }
        let deltas = self.open(&shares, true)?;
        let out: Vec<AuthPair> = corrs
            .iter()
            .zip(deltas.chunks(2))
            .map(|(c, d)| {
                AuthPair::new(
                    OptShare::new(self.party, d[0], c.lambda_z),
                    OptShare::new(self.party, d[1], c.lambda_mac_z),
                )
            })
            .collect();
        self.log.extend(out.iter().copied());
        Ok(out)
    }

    pub fn secure_inner_product(&mut self, d: &[AuthPair], t: &[OptShare], corr: SecIpCorrelation) -> Result<AuthPair> {
        Ok(self.secure_inner_product_batch(&[(d, t)], vec![corr])?[0])
    }

    /// Authenticated bits `1{x >= 0}` for each masked input, one round.
    pub fn secure_compare_batch(&mut self, xs: &[OptShare], corrs: Vec<SecCmpCorrelation>) -> Result<Vec<AuthPair>> {
        if xs.len() != corrs.len() {
            return Err(Error::CorrelationExhausted("comparison"));
        }
        let mut shares = Vec::with_capacity(2 * xs.len());
        for (x, c) in xs.iter().zip(&corrs) {
            let mut gamma = eval_lt(self.party, &c.key, x.delta)?;
            for (i, e) in self.fault_for(FaultTarget::ComparisonPayload) {
                if i == self.events.compares {
                    gamma.c0 += e;
                }
            }
            self.events.compares += 1;
            shares.push(gamma.c0 + c.b0 + c.lambda_z);
            shares.push(gamma.c1 + c.b1 + c.lambda_mac_z);
        }
        let deltas = self.open(&shares, true)?;
        let out: Vec<AuthPair> = corrs
            .iter()
            .zip(deltas.chunks(2))
            .map(|(c, d)| {
                AuthPair::new(
                    OptShare::new(self.party, d[0], c.lambda_z),
                    OptShare::new(self.party, d[1], c.lambda_mac_z),
                )
            })
            .collect();
        self.log.extend(out.iter().copied());
        Ok(out)
    }

    pub fn secure_compare(&mut self, x: &OptShare, corr: SecCmpCorrelation) -> Result<AuthPair> {
        Ok(self.secure_compare_batch(&[*x], vec![corr])?[0])
    }

    /// Jointly random public values below `2^bits`: commit, then reveal.
    pub fn coin_flip(&mut self, count: usize, bits: u32) -> Result<Vec<RingElement>> {
        let mine: Vec<u128> = (0..count).map(|_| self.rng.next_u128()).collect();
        let mut reveal = Vec::with_capacity(count * ELEMENT_BYTES + 32);
        for r in &mine {
            reveal.extend_from_slice(&r.to_le_bytes());
        }
        let nonce: [u8; 32] = self.rng.bytes();
        let commitment = hash_commit(&reveal, &nonce);
        reveal.extend_from_slice(&nonce);

        let peer_commit = self.exchange(Frame::new(MsgType::CoinCommit, self.session_id, commitment.to_vec()))?;
        let peer_reveal = self.exchange(Frame::new(MsgType::CoinReveal, self.session_id, reveal))?;
        let body = &peer_reveal.payload;
        if body.len() != count * ELEMENT_BYTES + 32 || peer_commit.payload.len() != 32 {
            return Err(abort(AbortReason::Commitment));
        }
        let (values, nonce) = body.split_at(count * ELEMENT_BYTES);
        if hash_commit(values, nonce.try_into().unwrap()).as_slice() != peer_commit.payload.as_slice() {
            return Err(abort(AbortReason::Commitment));
        }
        let mask = if bits >= 128 { u128::MAX } else { (1u128 << bits) - 1 };
        let coins: Vec<RingElement> = mine
            .iter()
            .zip(values.chunks_exact(ELEMENT_BYTES))
            .map(|(a, b)| self.params.element((a ^ u128::from_le_bytes(b.try_into().unwrap())) & mask))
            .collect();
        for c in &coins {
            self.view.update(c.to_le_bytes());
        }
        Ok(coins)
    }

    /// Batch MAC check over everything logged so far; clears the log.
    ///
    /// The `y0` message also carries a digest of this party's view of every
    /// opened value, so the parties abort if their views differ.
    pub fn mac_check(&mut self, key_share: &MacKeyShare, aux: MacAux) -> Result<()> {
        let entries = std::mem::take(&mut self.log.entries);
        let p = self.params;
        let coins = self.coin_flip(entries.len(), p.s())?;
        let mut y0 = p.two_pow_l() * aux.r;
        let mut y1 = aux.keyed_r;
        for (c, e) in coins.iter().zip(&entries) {
            y0 += *c * e.value.additive_share();
            y1 += *c * e.mac.additive_share();
        }
        for (_, e) in self.fault_for(FaultTarget::Y0Share) {
            y0 += e;
        }
        let digest = self.view_digest();
        let mut payload = y0.to_le_bytes().to_vec();
        payload.extend_from_slice(&digest);
        let peer = self.exchange(Frame::new(MsgType::MacCheckY0, self.session_id, payload))?;
        if peer.payload.len() != ELEMENT_BYTES + 32 {
            return Err(Error::Protocol("malformed MAC check message".into()));
        }
        if peer.payload[ELEMENT_BYTES..] != digest {
            return Err(abort(AbortReason::ViewMismatch));
        }
        let y0_open = y0 + p.decode_element(&peer.payload[..ELEMENT_BYTES])?;
        let mut z = y1 - y0_open * key_share.share;
        for (_, e) in self.fault_for(FaultTarget::ZShare) {
            z += e;
        }

        let nonce: [u8; 32] = self.rng.bytes();
        let z_bytes = z.to_le_bytes();
        let commitment = hash_commit(&z_bytes, &nonce);
        let peer_commit = self.exchange(Frame::new(MsgType::Commit, self.session_id, commitment.to_vec()))?;
        let mut opening = z_bytes.to_vec();
        opening.extend_from_slice(&nonce);
        let peer_open = self.exchange(Frame::new(MsgType::Decommit, self.session_id, opening))?;
        let body = &peer_open.payload;
        if body.len() != ELEMENT_BYTES + 32 || peer_commit.payload.len() != 32 {
            return Err(abort(AbortReason::Commitment));
        }
        if hash_commit(&body[..ELEMENT_BYTES], body[ELEMENT_BYTES..].try_into().unwrap()).as_slice()
            != peer_commit.payload.as_slice()
        {
            return Err(abort(AbortReason::Commitment));
        }
        let peer_z = p.decode_element(&body[..ELEMENT_BYTES]).map_err(|_| abort(AbortReason::Commitment))?;
        if !(z + peer_z).is_zero() {
            return Err(abort(AbortReason::MacCheck));
        }
        Ok(())
    }

    /// Lifts new database entries (identity first, then the template) and
    /// the MAC key if not yet lifted, then authenticates every element.
    ///
    /// `entry_lambdas[j]` masks `entries[j]`; `init` holds one correlation
    /// per element in order. The authenticated pairs are logged.
    pub fn initialize_db(
        &mut self,
        entries: &[Vec<RingElement>],
        entry_lambdas: &[Vec<RingElement>],
        mac_key: Option<OptShare>,
        key_share: &MacKeyShare,
        key_lambda: RingElement,
        init: Vec<MultCorrelation>,
    ) -> Result<(OptShare, Vec<Vec<AuthPair>>)> {
        if entries.len() != entry_lambdas.len() {
            return Err(Error::config("initialization: entry and mask counts differ"));
        }
        let mut inputs = Vec::new();
        let mut lambdas = Vec::new();
        if mac_key.is_none() {
            inputs.push(key_share.share);
            lambdas.push(key_lambda);
        }
        for (e, l) in entries.iter().zip(entry_lambdas) {
            if e.len() != l.len() {
                return Err(Error::config("initialization: entry width does not match its masks"));
            }
            inputs.extend_from_slice(e);
            lambdas.extend_from_slice(l);
        }
        let mut lifted = self.lift_to_optss(&inputs, &lambdas)?.into_iter();
        let mac_key = match mac_key {
            Some(mac_key) => mac_key,
            None => lifted.next().unwrap(),
        };
        let values: Vec<OptShare> = lifted.collect();
        if init.len() != values.len() {
            return Err(Error::config("initialization correlations are not sized to the entries"));
        }
        let pairs: Vec<(OptShare, OptShare)> = values.iter().map(|v| (mac_key, *v)).collect();
        let macs = self.mult_batch(&pairs, init)?;
        let auth: Vec<AuthPair> = values.into_iter().zip(macs).map(|(v, m)| AuthPair::new(v, m)).collect();
        self.log.extend(auth.iter().copied());
        let mut out = Vec::with_capacity(entries.len());
        let mut it = auth.into_iter();
        for e in entries {
            out.push(it.by_ref().take(e.len()).collect());
        }
        Ok((mac_key, out))
    }

    /// Keeps the running maximum and its identity: for each later entry,
    /// compare, then select both pairs with four multiplications in one round.
    /// Ties keep the earlier entry.
    pub fn select_top1(
        &mut self,
        scores: &[AuthPair],
        ids: &[AuthPair],
        cmps: &mut VecDeque<SecCmpCorrelation>,
        mults: &mut VecDeque<MultCorrelation>,
    ) -> Result<(AuthPair, AuthPair)> {
        if scores.is_empty() || scores.len() != ids.len() {
            return Err(Error::Protocol("top-1 selection needs equal, nonempty score and id lists".into()));
        }
        let mut best = scores[0];
        let mut best_id = ids[0];
        for i in 1..scores.len() {
            let diff = best.sub(&scores[i]);
            let corr = cmps.pop_front().ok_or(Error::CorrelationExhausted("comparison"))?;
            let b = self.secure_compare(&diff.value, corr)?;
            let id_diff = best_id.sub(&ids[i]);
            let pairs = [
                (b.value, diff.value),
                (b.value, diff.mac),
                (b.value, id_diff.value),
                (b.value, id_diff.mac),
            ];
            let corrs = (0..4)
                .map(|_| mults.pop_front().ok_or(Error::CorrelationExhausted("multiplication")))
                .collect::<Result<Vec<_>>>()?;
            let prods = self.mult_batch(&pairs, corrs)?;
            let score_step = AuthPair::new(prods[0], prods[1]);
            let id_step = AuthPair::new(prods[2], prods[3]);
            self.log.push(score_step);
            self.log.push(id_step);
            best = scores[i].add(&score_step);
            best_id = ids[i].add(&id_step);
        }
        Ok((best, best_id))
    }

    /// `residual = best - claimed` with its MAC `mac_key * best - mac_key * claimed`.
    pub fn identity_match(
        &mut self,
        best_id: &AuthPair,
        claimed: &OptShare,
        mac_key: &OptShare,
        corr: MultCorrelation,
    ) -> Result<AuthPair> {
        let mac_claimed = self.mult(mac_key, claimed, corr)?;
        let residual = AuthPair::new(best_id.value.sub(claimed), best_id.mac.sub(&mac_claimed));
        self.log.push(residual);
        Ok(residual)
    }

    /// Authenticated bit `1{score >= tau}`.
    pub fn threshold_check(&mut self, score: &AuthPair, tau: RingElement, corr: SecCmpCorrelation) -> Result<AuthPair> {
        self.secure_compare(&score.value.add_public(-tau), corr)
    }

    /// Runs one authentication session and the closing MAC check.
    pub fn authenticate(
        &mut self,
        db: &TemplateDb,
        request: &AuthRequest,
        mut tape: SessionTape,
        key_share: &MacKeyShare,
    ) -> Result<AuthDecision> {
        let mac_key = db.mac_key.ok_or_else(|| Error::Protocol("database is not initialized".into()))?;
        let width = db.width();
        if request.mode != tape.mode {
            return Err(Error::config(format!("session {} was provisioned for {} mode", tape.index, tape.mode)));
        }
        if request.template.len() != width || tape.template_lambda.len() != width {
            return Err(Error::Protocol(format!("template must have {width} entries")));
        }
        if tape.secips.len() != db.len() {
            return Err(Error::config("session correlations do not match the database size"));
        }

        let mut inputs = request.template.clone();
        let mut lambdas = tape.template_lambda.clone();
        if request.mode == Mode::Top1 {
            inputs.push(request.identity);
            lambdas.push(tape.identity_lambda.ok_or_else(|| Error::config("no identity mask provisioned"))?);
        }
        let lifted = self.lift_to_optss(&inputs, &lambdas)?;
        let template = &lifted[..width];

        let residual = match request.mode {
            Mode::Top1 => {
                let corrs = (0..db.len()).map(|_| tape.pop_secip()).collect::<Result<Vec<_>>>()?;
                let jobs: Vec<(&[AuthPair], &[OptShare])> =
                    db.entries.iter().map(|e| (e.template.as_slice(), template)).collect();
                let scores = self.secure_inner_product_batch(&jobs, corrs)?;
                let ids: Vec<AuthPair> = db.entries.iter().map(|e| e.identity).collect();
                let (_, best_id) = self.select_top1(&scores, &ids, &mut tape.seccmps, &mut tape.mults)?;
                let corr = tape.pop_mult()?;
                self.identity_match(&best_id, &lifted[width], &mac_key, corr)?
            }
            Mode::Threshold => {
                let entry = request.entry as usize;
                let target = db
                    .entries
                    .get(entry)
                    .ok_or_else(|| Error::Protocol(format!("no database entry {entry}")))?;
                let corr = tape.secips.drain(..).nth(entry).unwrap();
                let score = self.secure_inner_product(&target.template, template, corr)?;
                let corr = tape.pop_seccmp()?;
                let bit = self.threshold_check(&score, request.tau, corr)?;
                bit.public_minus(self.params.one(), &mac_key)
            }
        };
        self.mac_check(key_share, tape.mac_aux)?;
        Ok(AuthDecision { residual, mode: request.mode, metrics: self.metrics() })
    }

    /// Reference inner product that opens every product: `2n` masked
    /// values instead of two.
    pub fn open_then_sum_inner_product(
        &mut self,
        d: &[AuthPair],
        t: &[OptShare],
        corrs: Vec<MultCorrelation>,
    ) -> Result<AuthPair> {
        if d.len() != t.len() || corrs.len() != 2 * t.len() {
            return Err(Error::Protocol("open-then-sum: length mismatch".into()));
        }
        let mut pairs = Vec::with_capacity(2 * t.len());
        for (x, y) in d.iter().zip(t) {
            pairs.push((x.value, *y));
            pairs.push((x.mac, *y));
        }
        let prods = self.mult_batch_inner(&pairs, corrs, true)?;
        let mut value = OptShare::public(self.party, self.params.zero());
        let mut mac = value;
        for pr in prods.chunks(2) {
            let pair = AuthPair::new(pr[0], pr[1]);
            self.log.push(pair);
            value = value.add(&pr[0]);
            mac = mac.add(&pr[1]);
        }
        Ok(AuthPair::new(value, mac))
    }
}

/// Runs `f` for both parties on an in-process channel pair, one thread each.
pub fn run_two_party<T, F>(f: F) -> [T; 2]
where
    T: Send,
    F: Fn(PartyId, &mut Channel) -> T + Sync,
{
    let (mut c0, mut c1) = Channel::in_process_pair();
    std::thread::scope(|s| {
        let f = &f;
        let h = s.spawn(move || f(PartyId::P1, &mut c1));
        let r0 = f(PartyId::P0, &mut c0);
        [r0, h.join().expect("party 1 panicked")]
    })
}

/// Encodes a result share as the RESULT frame payload: delta then lambda.
pub fn encode_result(residual: &OptShare) -> Vec<u8> {
    encode_elements(&[residual.delta, residual.lambda])
}
