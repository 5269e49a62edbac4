//! The operator commands. Each one is a thin shell over the core library.

use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Instant;

use twinauth_core::client::{Client, Metric, Phase, Request};
use twinauth_core::dealer::{audit, provision, write_tape, AuditReport, ProvisionPlan};
use twinauth_core::node::{decide, Decision, Deployment, FaultPlan, ResultShare, Server, SessionOutcome};
use twinauth_core::protocols::{Mode, SessionShape};
use twinauth_core::ring::{RingParams, SeededRng};
use twinauth_core::shares::PartyId;
use twinauth_core::tape::{ByteReader, ByteWriter};
use twinauth_core::transport::Channel;
use twinauth_core::{Error, Result};

use crate::bench::BenchReport;
use crate::config::Config;

const CONNECT_ATTEMPTS: u32 = 400;

pub fn server_seed(seed: [u8; 32], party: PartyId) -> [u8; 32] {
    SeededRng::new(seed).derive(&format!("server/{}", party.index())).seed()
}

pub fn client_rng(seed: [u8; 32], phase: Phase, session: u32) -> SeededRng {
    let root = SeededRng::new(seed);
    match phase {
        Phase::Registration => root.derive("client/register"),
        Phase::Authentication => root.derive(&format!("client/auth/{session}")),
    }
}

pub fn plan(cfg: &Config) -> Result<ProvisionPlan> {
    Ok(ProvisionPlan::new(cfg.params()?, cfg.m, cfg.n, vec![cfg.mode()?; cfg.sessions]))
}

/// Provisions both tapes into `out`, optionally auditing them first.
pub fn cmd_dealer(cfg: &Config, out: &Path, audit_tapes: bool) -> Result<Option<AuditReport>> {
    let seed = cfg.seed()?;
    let tapes = provision(&plan(cfg)?, seed)?;
    let report = if audit_tapes { Some(audit(&tapes, u64::from_le_bytes(seed[..8].try_into().unwrap()))?) } else { None };
    fs::create_dir_all(out)?;
    for (i, tape) in tapes.iter().enumerate() {
        write_tape(tape, &cfg.tape_path(out, i))?;
    }
    Ok(report)
}

/// Reads `identity,v1,...,vn` rows without a header.
pub fn read_templates(path: &Path, n: usize) -> Result<Vec<(u64, Vec<f64>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let bad = |what: &str| Error::config(format!("{} row {}: {what}", path.display(), line + 1));
        if record.len() != n + 1 {
            return Err(bad(&format!("expected an identity and {n} values, found {} fields", record.len())));
        }
        let identity = record[0].parse().map_err(|_| bad("identity is not an unsigned integer"))?;
        let values = record
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>().map_err(|_| bad(&format!("{v:?} is not a number"))))
            .collect::<Result<Vec<_>>>()?;
        out.push((identity, values));
    }
    Ok(out)
}

pub fn write_templates(path: &Path, rows: &[(u64, Vec<f64>)]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(|e| Error::config(e.to_string()))?;
    for (id, values) in rows {
        let mut record = vec![id.to_string()];
        record.extend(values.iter().map(|v| v.to_string()));
        w.write_record(&record).map_err(|e| Error::config(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Random templates: unit-range reals for cosine, small integers for euclidean.
pub fn synth_templates(metric: Metric, m: usize, n: usize, rng: &mut SeededRng) -> Vec<(u64, Vec<f64>)> {
    (0..m)
        .map(|j| {
            let values = (0..n)
                .map(|_| match metric {
                    Metric::Cosine => (rng.next_u128() as u32 as f64 / u32::MAX as f64) * 2.0 - 1.0,
                    Metric::Euclidean => (rng.next_u128() % 33) as f64 - 16.0,
                })
                .collect();
            (j as u64, values)
        })
        .collect()
}

pub fn write_batch(path: &Path, requests: &[Request]) -> Result<()> {
    let mut w = ByteWriter::new();
    w.u32(requests.len() as u32);
    for r in requests {
        let bytes = r.to_bytes();
        w.u32(bytes.len() as u32);
        w.bytes(&bytes);
    }
    fs::write(path, w.into_inner())?;
    Ok(())
}

pub fn read_batch(path: &Path, params: RingParams) -> Result<Vec<Request>> {
    let bytes = fs::read(path)?;
    let mut r = ByteReader::new(&bytes);
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u32()? as usize;
        out.push(Request::from_bytes(r.take(len)?, params)?);
    }
    if !r.is_empty() {
        return Err(Error::Decode("trailing bytes in request batch".into()));
    }
    Ok(out)
}

pub fn request_path(dir: &Path, phase: Phase, party: usize) -> PathBuf {
    match phase {
        Phase::Registration => dir.join(format!("enroll.p{party}.req")),
        Phase::Authentication => dir.join(format!("auth.p{party}.req")),
    }
}

/// Prepares and splits templates into one request batch per server.
pub fn cmd_client(cfg: &Config, phase: Phase, templates: &Path, session: u32, out: &Path) -> Result<[PathBuf; 2]> {
    let rows = read_templates(templates, cfg.n)?;
    if phase == Phase::Authentication && rows.len() != 1 {
        return Err(Error::config("an authentication request holds exactly one template"));
    }
    let mut client = Client::new(cfg.params()?, client_rng(cfg.seed()?, phase, session));
    let metric = cfg.metric()?;
    let mut batches = [Vec::new(), Vec::new()];
    for (id, values) in &rows {
        let [a, b] = client.request(values, *id, metric, phase)?;
        batches[0].push(a);
        batches[1].push(b);
    }
    fs::create_dir_all(out)?;
    let paths = [request_path(out, phase, 0), request_path(out, phase, 1)];
    for (path, batch) in paths.iter().zip(&batches) {
        write_batch(path, batch)?;
    }
    Ok(paths)
}

/// Party 0 listens on its endpoint; party 1 dials it.
pub fn connect(cfg: &Config, party: PartyId) -> Result<Channel> {
    let addr = &cfg.endpoints[0];
    let ch = if party.is_leader() {
        let listener = TcpListener::bind(addr)?;
        Channel::tcp_accept(&listener)?
    } else {
        Channel::tcp_connect(addr.as_str(), CONNECT_ATTEMPTS)?
    };
    Ok(ch)
}

pub fn cmd_server_enroll(cfg: &Config, party: PartyId, dir: &Path, requests: &Path) -> Result<usize> {
    let path = cfg.tape_path(dir, party.index());
    let mut server = Server::load(&path, server_seed(cfg.seed()?, party))?;
    check_party(&server, party)?;
    let batch = read_batch(requests, server.params())?;
    let entries: Vec<_> = batch.iter().map(Request::entry).collect();
    let mut ch = connect(cfg, party)?;
    server.enroll(&mut ch, &entries)?;
    server.save(&path)?;
    Ok(server.db().map_or(0, |db| db.len()))
}

pub fn cmd_server_authenticate(
    cfg: &Config,
    party: PartyId,
    dir: &Path,
    request: &Path,
    entry: u32,
    faults: Vec<FaultPlan>,
    result: &Path,
) -> Result<SessionOutcome> {
    let path = cfg.tape_path(dir, party.index());
    let mut server = Server::load(&path, server_seed(cfg.seed()?, party))?;
    check_party(&server, party)?;
    let batch = read_batch(request, server.params())?;
    let [req] = batch.as_slice() else {
        return Err(Error::config("expected exactly one authentication request"));
    };
    server.set_faults(faults);
    server.record_transcripts(true);
    let mut ch = connect(cfg, party)?;
    let req = twinauth_core::node::auth_request(req, cfg.mode()?, entry, cfg.tau()?);
    let outcome = server.run_session(&mut ch, &req, cfg.metric()?.code());
    server.save(&path)?;
    let outcome = outcome?;
    fs::write(result, outcome.result.to_bytes(outcome.session_id))?;
    Ok(outcome)
}

fn check_party(server: &Server, party: PartyId) -> Result<()> {
    if server.party != party {
        return Err(Error::config(format!("tape belongs to {}, not {party}", server.party)));
    }
    Ok(())
}

pub fn cmd_verify(cfg: &Config, results: [&Path; 2]) -> Result<Decision> {
    let params = cfg.params()?;
    let (s0, r0) = ResultShare::from_bytes(&fs::read(results[0])?, params)?;
    let (s1, r1) = ResultShare::from_bytes(&fs::read(results[1])?, params)?;
    if s0 != s1 {
        return Err(Error::Protocol(format!("result shares come from sessions {s0} and {s1}")));
    }
    Ok(decide(&r0, &r1))
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Database entry whose template is presented.
    pub probe: usize,
    /// Claimed identity; defaults to the probe's own.
    pub claimed: Option<u64>,
    pub faults: Vec<FaultPlan>,
    /// Bind an ephemeral port instead of the configured endpoint.
    pub ephemeral: bool,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub decision: Decision,
    pub outcomes: [SessionOutcome; 2],
    pub report: BenchReport,
    pub wall_ms: f64,
}

/// Dealer, client, both servers and the verifier in one process, with
/// the servers talking over TCP loopback.
pub fn run_loopback(cfg: &Config, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let start = Instant::now();
    let (params, seed, metric, mode) = (cfg.params()?, cfg.seed()?, cfg.metric()?, cfg.mode()?);
    if opts.probe >= cfg.m {
        return Err(Error::config(format!("probe {} outside a database of {}", opts.probe, cfg.m)));
    }
    let mut report = BenchReport::new(params);

    let t = Instant::now();
    let tapes = provision(&plan(cfg)?, seed)?;
    let offline_ms = t.elapsed().as_secs_f64() * 1e3;
    report.record("offline", Default::default(), &[offline_ms], &[("sessions", cfg.sessions as u64)]);

    let rows = synth_templates(metric, cfg.m, cfg.n, &mut SeededRng::new(seed).derive("templates"));
    let mut client = Client::new(params, client_rng(seed, Phase::Registration, 0));
    let regs =
        rows.iter().map(|(id, v)| client.request(v, *id, metric, Phase::Registration)).collect::<Result<Vec<_>>>()?;
    let mut client = Client::new(params, client_rng(seed, Phase::Authentication, 0));
    let (probe_id, probe) = &rows[opts.probe];
    let auth = client.request(probe, opts.claimed.unwrap_or(*probe_id), metric, Phase::Authentication)?;

    let mut dep = Deployment::new(tapes, seed);
    for (s, party) in dep.servers.iter_mut().zip(PartyId::both()) {
        s.set_faults(opts.faults.iter().copied().filter(|f| f.party == party).collect());
        s.record_transcripts(true);
    }
    let addr = if opts.ephemeral { "127.0.0.1:0" } else { cfg.endpoints[0].as_str() };
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let (c0, c1) = std::thread::scope(|s| {
        let dial = s.spawn(move || Channel::tcp_connect(local, CONNECT_ATTEMPTS));
        let c0 = Channel::tcp_accept(&listener);
        (c0, dial.join().expect("dialer panicked"))
    });
    let (mut c0, mut c1) = (c0?, c1?);

    let t = Instant::now();
    dep.enroll_with([&mut c0, &mut c1], &regs)?;
    let enroll_ms = t.elapsed().as_secs_f64() * 1e3;
    let width = cfg.n as u64 + 2;
    report.record(
        "enroll",
        [c0.snapshot_metrics(), c1.snapshot_metrics()],
        &[enroll_ms],
        &[("entries", cfg.m as u64), ("mult", cfg.m as u64 * width)],
    );

    let t = Instant::now();
    let (decision, outcomes) = dep.authenticate_with([&mut c0, &mut c1], &auth, mode, opts.probe as u32, cfg.tau()?)?;
    let auth_ms = t.elapsed().as_secs_f64() * 1e3;
    let shape = SessionShape::authentication(mode, cfg.m, cfg.n);
    let (secip, mults) = match mode {
        Mode::Top1 => (cfg.m as u64, 4 * (cfg.m as u64 - 1) + 1),
        Mode::Threshold => (1, 0),
    };
    report.record(
        &format!("authenticate/{mode}"),
        [outcomes[0].metrics, outcomes[1].metrics],
        &[auth_ms],
        &[("secip", secip), ("seccmp", shape.compares as u64), ("mult", mults), ("opens", shape.opens as u64)],
    );
    Ok(RunSummary { decision, outcomes, report, wall_ms: start.elapsed().as_secs_f64() * 1e3 })
}
