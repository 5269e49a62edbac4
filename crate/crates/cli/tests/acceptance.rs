//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use twinauth_cli::bench::{bench_seccmp, bench_secip, sweep, BenchReport};
use twinauth_cli::{run_loopback, Config, RunOptions};
use twinauth_core::client::{preprocess, quantize, Client, Metric, Phase, Request};
use twinauth_core::dealer::{deal_authenticated, deal_masked, gen_secip_corr, gen_seccmp_corr, provision, ProvisionPlan};
use twinauth_core::fss::{eval_lt, gen_lt, Payload2};
use twinauth_core::node::{Deployment, Outcome};
use twinauth_core::protocols::{run_two_party, FaultPlan, FaultTarget, Mode, Session, SessionShape};
use twinauth_core::ring::{FixedCodec, RingElement, RingParams, SeededRng};
use twinauth_core::shares::{open, open_pair, reconstruct, split, OptShare, PartyId};

type Check = std::result::Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !($cond) {
            return Err(format!($($msg)+));
        }
    };
}

fn small() -> RingParams {
    RingParams::new(8, 4).unwrap()
}

fn key_share(p: RingParams, rng: &mut SeededRng) -> RingElement {
    p.element(rng.next_u128() & ((1u128 << p.s()) - 1))
}

fn random(p: RingParams, rng: &mut SeededRng) -> RingElement {
    p.element(rng.next_u128())
}

fn share_algebra() -> Check {
    let mut rng = SeededRng::from_u64(1);
    for p in [small(), RingParams::DEFAULT] {
        for _ in 0..10_000 {
            let (x, y, c) = (random(p, &mut rng), random(p, &mut rng), random(p, &mut rng));
            let (a, b) = split(x, &mut rng);
            ensure!(reconstruct(&a, &b) == x, "split/reconstruct lost {x} at {p}");

            let ([xs0, xs1], _) = deal_masked(&[x], &mut rng);
            let ([ys0, ys1], _) = deal_masked(&[y], &mut rng);
            let (x0, x1, y0, y1) = (xs0[0], xs1[0], ys0[0], ys1[0]);
            ensure!(open(&x0, &x1).unwrap() == x, "open of a masked share at {p}");
            ensure!(open(&x0.add(&y0), &x1.add(&y1)).unwrap() == x + y, "addition at {p}");
            ensure!(open(&x0.sub(&y0), &x1.sub(&y1)).unwrap() == x - y, "subtraction at {p}");
            ensure!(open(&x0.mul_public(c), &x1.mul_public(c)).unwrap() == x * c, "public product at {p}");
            ensure!(open(&x0.add_public(c), &x1.add_public(c)).unwrap() == x + c, "public sum at {p}");
            ensure!(open(&x0.neg(), &x1.neg()).unwrap() == -x, "negation at {p}");
            ensure!(x0.additive_share() + x1.additive_share() == x, "additive view at {p}");
        }
    }
    Ok("10^4 trials at (8,4) and (64,64)".into())
}

fn inner_product_correctness() -> Check {
    let p = RingParams::DEFAULT;
    let mut rng = SeededRng::from_u64(2);
    for n in [1usize, 3, 512] {
        let mut cases = Vec::new();
        for _ in 0..500 {
            let mac_key = key_share(p, &mut rng);
            let d: Vec<_> = (0..n).map(|_| random(p, &mut rng)).collect();
            let t: Vec<_> = (0..n).map(|_| random(p, &mut rng)).collect();
            let expect: RingElement = d.iter().zip(&t).map(|(&a, &b)| a * b).sum();
            let (dp, lx, lpx) = deal_authenticated(&d, mac_key, &mut rng);
            let (tp, ly) = deal_masked(&t, &mut rng);
            let corr = gen_secip_corr(&lx, &lpx, &ly, random(p, &mut rng), random(p, &mut rng), &mut rng).unwrap();
            cases.push((mac_key, expect, dp, tp, corr));
        }
        let [r0, r1] = run_two_party(|party, ch| {
            let i = party.index();
            let mut s = Session::new(party, p, 0, ch, SeededRng::from_u64(i as u64));
            cases
                .iter()
                .map(|(_, _, dp, tp, corr)| s.secure_inner_product(&dp[i], &tp[i], corr[i].clone()).unwrap())
                .collect::<Vec<_>>()
        });
        for (k, (mac_key, expect, ..)) in cases.iter().enumerate() {
            let (v, mac) = open_pair(&r0[k], &r1[k]).unwrap();
            ensure!(v == *expect, "n={n} case {k}: value {v} != {expect}");
            ensure!(mac == *mac_key * *expect, "n={n} case {k}: MAC does not match");
        }
    }
    Ok("500 instances at n = 1, 3, 512".into())
}

fn compare_all(p: RingParams, xs: Vec<(RingElement, [OptShare; 2], RingElement)>, rng: &mut SeededRng) -> Check {
    let mac_key = key_share(p, rng);
    let corrs: Vec<_> = xs
        .iter()
        .map(|(_, _, lambda)| gen_seccmp_corr(*lambda, mac_key, random(p, rng), random(p, rng), rng).unwrap())
        .collect();
    let [r0, r1] = run_two_party(|party, ch| {
        let i = party.index();
        let mut s = Session::new(party, p, 0, ch, SeededRng::from_u64(i as u64));
        let inputs: Vec<_> = xs.iter().map(|(_, sh, _)| sh[i]).collect();
        let out = s.secure_compare_batch(&inputs, corrs.iter().map(|c| c[i].clone()).collect()).unwrap();
        (out, s.metrics().rounds)
    });
    ensure!(r0.1 == 1 && r1.1 == 1, "comparison batch took {} rounds", r0.1);
    let mut failures = 0;
    for (k, (x, ..)) in xs.iter().enumerate() {
        let expect = if x.to_signed_l() >= 0 { p.one() } else { p.zero() };
        let (bit, mac) = open_pair(&r0.0[k], &r1.0[k]).unwrap();
        if bit != expect || mac != mac_key * expect {
            failures += 1;
        }
    }
    ensure!(failures == 0, "{failures} of {} comparisons wrong at {p}", xs.len());
    Ok(String::new())
}

fn comparison_correctness() -> Check {
    let mut rng = SeededRng::from_u64(3);
    let lambda = small().element(1000);
    let exhaustive: Vec<_> = (-128i128..128)
        .map(|v| {
            let x = small().from_signed(v);
            let (a, b) = split(lambda, &mut rng);
            let delta = x + lambda;
            (x, [OptShare::new(PartyId::P0, delta, a.value), OptShare::new(PartyId::P1, delta, b.value)], lambda)
        })
        .collect();
    compare_all(small(), exhaustive, &mut rng)?;

    let p = RingParams::DEFAULT;
    let bound = 1i128 << 62;
    let random_cases: Vec<_> = (0..10_000)
        .map(|_| {
            let v = (rng.next_u128() as i128).rem_euclid(2 * bound - 1) - (bound - 1);
            let x = p.from_signed(v);
            let ([s0, s1], lambdas) = deal_masked(&[x], &mut rng);
            (x, [s0[0], s1[0]], lambdas[0])
        })
        .collect();
    compare_all(p, random_cases, &mut rng)?;
    Ok("256 exhaustive at l=8 with lambda=1000, 10^4 random with |x| < 2^62, 0 failures".into())
}

fn dcf_correctness() -> Check {
    let p = RingParams::DEFAULT;
    let mut rng = SeededRng::from_u64(4);
    for pair in 0..50 {
        let a = p.element(rng.next_u128() % 1024);
        let payload = Payload2::new(random(p, &mut rng), random(p, &mut rng));
        let (k0, k1) = gen_lt(a, payload, 10, &mut rng).unwrap();
        for x in 0..1024u128 {
            let x = p.element(x);
            let sum = eval_lt(PartyId::P0, &k0, x).unwrap() + eval_lt(PartyId::P1, &k1, x).unwrap();
            let expect = if x.value() < a.value() { payload } else { Payload2::zero(p) };
            ensure!(sum == expect, "pair {pair}: a={a} x={x}");
        }
    }
    Ok("50 pairs over the full 10-bit domain".into())
}

fn communication() -> Check {
    let p = RingParams::DEFAULT;
    let mut report = BenchReport::new(p);
    let sizes = sweep(3, 12);
    for &n in &sizes {
        bench_secip(&mut report, p, n, 1, n as u64).map_err(|e| e.to_string())?;
    }
    for &n in &sizes {
        for party in [0, 1] {
            let row = report.row(&format!("secip/n={n}"), party).unwrap();
            ensure!(row.bytes == 32 + 9, "n={n} party {party}: {} bytes", row.bytes);
        }
    }
    let ours = report.row("secip/n=1024", 0).unwrap().bytes as f64;
    let base = report.row("secip-baseline/n=1024", 0).unwrap().bytes as f64;
    let ratio_ok = base / ours >= 1024.0 / 4.0;
    ensure!(ratio_ok, "baseline ratio {:.1} below 256", base / ours);
    Ok(format!("41 bytes per party for n = 2^3..2^12; baseline ratio {:.0} at n=1024", base / ours))
}

fn one_round() -> Check {
    let p = RingParams::DEFAULT;
    let mut report = BenchReport::new(p);
    let sizes = sweep(3, 12);
    for &n in &sizes {
        bench_secip(&mut report, p, n, 1, n as u64).map_err(|e| e.to_string())?;
        bench_seccmp(&mut report, p, n, 1, n as u64).map_err(|e| e.to_string())?;
    }
    for row in report.rows.iter().filter(|r| !r.phase.starts_with("secip-baseline")) {
        ensure!(row.rounds == 1, "{} party {} took {} rounds", row.phase, row.party, row.rounds);
    }
    Ok(format!("secip and seccmp at {} sizes each", sizes.len()))
}

/// Enrolled deployment over random euclidean templates with `sessions` provisioned.
fn deployment(m: usize, n: usize, sessions: Vec<Mode>, seed: u64) -> (Deployment, Client, Vec<Vec<f64>>) {
    let p = RingParams::DEFAULT;
    let mut rng = SeededRng::from_u64(seed);
    let tapes = provision(&ProvisionPlan::new(p, m, n, sessions), rng.bytes()).unwrap();
    let mut dep = Deployment::new(tapes, rng.bytes());
    let db: Vec<Vec<f64>> =
        (0..m).map(|_| (0..n).map(|_| (rng.next_u128() % 17) as f64 - 8.0).collect()).collect();
    let mut client = Client::new(p, rng.derive("client"));
    let regs: Vec<_> = db
        .iter()
        .enumerate()
        .map(|(j, t)| client.request(t, j as u64, Metric::Euclidean, Phase::Registration).unwrap())
        .collect();
    dep.enroll(&regs).unwrap();
    (dep, client, db)
}

fn mac_soundness() -> Check {
    let (m, n, trials) = (4, 8, 20);
    let targets = [
        FaultTarget::OpenDelta,
        FaultTarget::Y0Share,
        FaultTarget::ZShare,
        FaultTarget::ComparisonPayload,
        FaultTarget::TripleShare,
    ];
    let runs = (targets.len() + 1) * 2 * trials;
    let (mut dep, mut client, db) = deployment(m, n, vec![Mode::Top1; runs], 7);
    let shape = SessionShape::authentication(Mode::Top1, m, n);
    let p = dep.params();
    let mut rng = SeededRng::from_u64(70);
    let mut aborted = [0usize; 2];
    for (k, target) in targets.into_iter().chain([FaultTarget::OpenConsistent]).enumerate() {
        let range = match target {
            FaultTarget::OpenDelta => shape.opens,
            FaultTarget::OpenConsistent => shape.auth_opens,
            FaultTarget::ComparisonPayload => shape.compares,
            FaultTarget::TripleShare => shape.correlations,
            FaultTarget::Y0Share | FaultTarget::ZShare => 1,
        };
        for party in PartyId::both() {
            for _ in 0..trials {
                let index = (rng.next_u128() % range as u128) as usize;
                let error = loop {
                    let e = rng.next_u128() as i128;
                    if e != 0 {
                        break e;
                    }
                };
                dep.servers[party.index()].set_faults(vec![FaultPlan { target, index, error, party }]);
                let j = (rng.next_u128() % m as u128) as usize;
                let req = client.request(&db[j], j as u64, Metric::Euclidean, Phase::Authentication).unwrap();
                let (d, _) = dep.authenticate(&req, Mode::Top1, 0, p.zero()).unwrap();
                dep.servers[party.index()].set_faults(Vec::new());
                if d.outcome == Outcome::Abort {
                    aborted[usize::from(k == targets.len())] += 1;
                } else {
                    return Err(format!("{target} at {index} by {party} gave {:?}", d.outcome));
                }
            }
        }
    }

    let honest = 1000;
    let (mut dep, mut client, db) = deployment(m, n, vec![Mode::Top1; honest], 8);
    let mut honest_aborts = 0;
    for k in 0..honest {
        let j = k % m;
        let req = client.request(&db[j], j as u64, Metric::Euclidean, Phase::Authentication).unwrap();
        let (d, _) = dep.authenticate(&req, Mode::Top1, 0, p.zero()).unwrap();
        honest_aborts += usize::from(d.outcome == Outcome::Abort);
        ensure!(d.outcome != Outcome::Deny, "honest session {k} denied a genuine probe");
    }
    ensure!(honest_aborts == 0, "{honest_aborts} honest sessions aborted");
    Ok(format!(
        "faulted ABORT {}/{}, extra open-consistent target {}/{}, honest ABORT 0/{honest}",
        aborted[0],
        targets.len() * 2 * trials,
        aborted[1],
        2 * trials
    ))
}

/// Plaintext preprocessing written out directly, independent of the client module.
fn plain_vector(t: &[f64], metric: Metric, phase: Phase) -> Vec<i128> {
    match (metric, phase) {
        (Metric::Cosine, _) => {
            let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut out: Vec<i128> = t.iter().map(|v| ((v / norm * 128.0).round() as i128).clamp(-128, 127)).collect();
            out.push(0);
            out
        }
        (Metric::Euclidean, Phase::Registration) => {
            let mut out: Vec<i128> = t.iter().map(|&v| 2 * v as i128).collect();
            out.push(-t.iter().map(|&v| (v as i128) * (v as i128)).sum::<i128>());
            out
        }
        (Metric::Euclidean, Phase::Authentication) => {
            let mut out: Vec<i128> = t.iter().map(|&v| v as i128).collect();
            out.push(1);
            out
        }
    }
}

fn dot(a: &[i128], b: &[i128]) -> i128 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn pipeline_for(metric: Metric, mode: Mode, sessions: usize, seed: u64) -> Check {
    let (m, n) = (64, 16);
    let p = RingParams::DEFAULT;
    let mut rng = SeededRng::from_u64(seed);
    let tapes = provision(&ProvisionPlan::new(p, m, n, vec![mode; sessions]), rng.bytes()).unwrap();
    let mut dep = Deployment::new(tapes, rng.bytes());
    let sample = |rng: &mut SeededRng| match metric {
        Metric::Euclidean => (rng.next_u128() % 17) as f64 - 8.0,
        Metric::Cosine => (rng.next_u128() % 2001) as f64 / 1000.0 - 1.0,
    };
    let db: Vec<Vec<f64>> = (0..m).map(|_| (0..n).map(|_| sample(&mut rng)).collect()).collect();
    let ids: Vec<u64> = (0..m as u64).map(|j| 5000 + 3 * j).collect();
    let mut client = Client::new(p, rng.derive("client"));
    let regs: Vec<[Request; 2]> = db
        .iter()
        .zip(&ids)
        .map(|(t, &id)| client.request(t, id, metric, Phase::Registration).unwrap())
        .collect();
    dep.enroll(&regs).unwrap();
    let enrolled: Vec<Vec<i128>> = db.iter().map(|t| plain_vector(t, metric, Phase::Registration)).collect();

    let mut tally = [0usize; 2];
    for k in 0..sessions {
        let j = (rng.next_u128() % m as u128) as usize;
        let probe: Vec<f64> = db[j]
            .iter()
            .map(|&v| match metric {
                Metric::Euclidean => v + ((rng.next_u128() % 3) as f64 - 1.0),
                Metric::Cosine => v + ((rng.next_u128() % 201) as f64 / 1000.0 - 0.1),
            })
            .collect();
        let claimed = if rng.next_u128().is_multiple_of(4) { ids[(rng.next_u128() % m as u128) as usize] } else { ids[j] };
        let q = plain_vector(&probe, metric, Phase::Authentication);
        let scores: Vec<i128> = enrolled.iter().map(|e| dot(e, &q)).collect();
        let (tau, expect) = match mode {
            Mode::Top1 => {
                let best = (1..m).fold(0, |b, i| if scores[i] > scores[b] { i } else { b });
                (0, ids[best] == claimed)
            }
            Mode::Threshold => {
                let offset = (rng.next_u128() % 9) as i128 - 4;
                let tau = scores[j] + offset * (1 + scores[j].abs() / 64);
                (tau, scores[j] >= tau)
            }
        };
        let req = client.request(&probe, claimed, metric, Phase::Authentication).unwrap();
        let (d, _) = dep.authenticate(&req, mode, j as u32, p.from_signed(tau)).unwrap();
        let want = if expect { Outcome::Grant } else { Outcome::Deny };
        ensure!(d.outcome == want, "{metric}/{mode} session {k}: got {:?}, oracle says {want:?}", d.outcome);
        tally[usize::from(expect)] += 1;
    }
    Ok(format!("{metric}/{mode} {sessions}/{sessions} ({} grant, {} deny)", tally[1], tally[0]))
}

fn pipeline() -> Check {
    let mut parts = Vec::new();
    for (seed, metric) in [(80, Metric::Cosine), (81, Metric::Euclidean)] {
        for mode in [Mode::Top1, Mode::Threshold] {
            parts.push(pipeline_for(metric, mode, 200, seed)?);
        }
    }
    Ok(parts.join("; "))
}

fn euclidean_surrogate() -> Check {
    let mut rng = SeededRng::from_u64(9);
    let n = 8;
    let vector = |rng: &mut SeededRng| -> Vec<f64> { (0..n).map(|_| (rng.next_u128() % 201) as f64 - 100.0).collect() };
    let codec = FixedCodec::default();
    let encode = |t: &[f64], phase| quantize(&preprocess(t, Metric::Euclidean, phase).unwrap(), codec).unwrap();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| ((x - y) as i128).pow(2)).sum::<i128>();
    for k in 0..1000 {
        let (probe, a, b) = (vector(&mut rng), vector(&mut rng), vector(&mut rng));
        let q = encode(&probe, Phase::Authentication);
        let (sa, sb) = (dot(&encode(&a, Phase::Registration), &q), dot(&encode(&b, Phase::Registration), &q));
        let (da, db) = (dist(&probe, &a), dist(&probe, &b));
        ensure!(da.cmp(&db) == sb.cmp(&sa), "triple {k}: distances {da} vs {db}, scores {sa} vs {sb}");
    }
    Ok("10^3 triples, 0 violations".into())
}

fn desk_scale() -> Check {
    let mut cfg = Config::new(1240, 512);
    cfg.seed = Some("5eed".into());
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let summary = run_loopback(&cfg, &RunOptions { probe: 617, ephemeral: true, ..Default::default() })
        .map_err(|e| e.to_string())?;
    summary.report.write(dir.path()).map_err(|e| e.to_string())?;
    ensure!(summary.decision.outcome == Outcome::Grant, "decision {:?}", summary.decision);
    ensure!(dir.path().join("bench.csv").exists(), "no bench report written");
    let row = summary.report.row("authenticate/top1", 0).unwrap();
    Ok(format!(
        "GRANT at m=1240 n=512 in {:.1} s; online {} bytes, {} rounds per party",
        summary.wall_ms / 1e3,
        row.bytes,
        row.rounds
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("share algebra", Duration::from_secs(5), share_algebra),
        ("inner product correctness", Duration::from_secs(30), inner_product_correctness),
        ("comparison correctness", Duration::from_secs(120), comparison_correctness),
        ("DCF correctness", Duration::from_secs(60), dcf_correctness),
        ("communication independent of n", Duration::MAX, communication),
        ("one round", Duration::MAX, one_round),
        ("MAC soundness", Duration::from_secs(300), mac_soundness),
        ("end-to-end pipeline", Duration::from_secs(120), pipeline),
        ("euclidean surrogate ordering", Duration::MAX, euclidean_surrogate),
        ("desk-scale deployment", Duration::from_secs(60), desk_scale),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (k, (name, budget, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let took = start.elapsed();
        let result = match result {
            Ok(detail) if took > budget => Err(format!("{detail}; over the {budget:?} budget")),
            r => r,
        };
        match result {
            Ok(detail) => println!("PASS {:>2} {name} ({:.2} s): {detail}", k + 1, took.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({:.2} s): {why}", k + 1, took.as_secs_f64());
            }
        }
    }
    println!("{} of 10 criteria passed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
