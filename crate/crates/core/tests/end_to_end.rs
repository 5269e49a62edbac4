use twinauth_core::client::{Client, Metric, Phase, Request};
use twinauth_core::dealer::{provision, ProvisionPlan};
use twinauth_core::node::{Deployment, Outcome, Server};
use twinauth_core::protocols::{FaultPlan, FaultTarget, Mode, SessionShape};
use twinauth_core::ring::{RingParams, SeededRng};
use twinauth_core::shares::{open_pair, PartyId};
use twinauth_core::AbortReason;

struct World {
    dep: Deployment,
    client: Client,
    db: Vec<Vec<f64>>,
    metric: Metric,
}

fn templates(m: usize, n: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    (0..m).map(|_| (0..n).map(|_| (rng.next_u128() % 17) as f64 - 8.0).collect()).collect()
}

fn world(m: usize, n: usize, sessions: Vec<Mode>, metric: Metric, seed: u8) -> World {
    let p = RingParams::DEFAULT;
    let tapes = provision(&ProvisionPlan::new(p, m, n, sessions), [seed; 32]).unwrap();
    let mut dep = Deployment::new(tapes, [seed ^ 0x55; 32]);
    let mut rng = SeededRng::from_u64(seed as u64);
    let db = templates(m, n, &mut rng);
    let mut client = Client::new(p, rng.derive("client"));
    let regs: Vec<[Request; 2]> = db
        .iter()
        .enumerate()
        .map(|(j, t)| client.request(t, 100 + j as u64, metric, Phase::Registration).unwrap())
        .collect();
    dep.enroll(&regs).unwrap();
    World { dep, client, db, metric }
}

impl World {
    fn probe(&mut self, j: usize, claimed: u64) -> [Request; 2] {
        let t = self.db[j].clone();
        self.client.request(&t, claimed, self.metric, Phase::Authentication).unwrap()
    }
}

#[test]
fn enrolled_database_is_authenticated() {
    let w = world(3, 4, vec![], Metric::Euclidean, 1);
    let [d0, d1] = [0, 1].map(|i| w.dep.servers[i].db().unwrap().clone());
    assert_eq!(d0.len(), 3);
    let mac_key = open_pair(&d0.entries[0].identity, &d1.entries[0].identity).unwrap();
    let mac_key = mac_key.1 .value() / mac_key.0.value();
    for (a, b) in d0.entries.iter().zip(&d1.entries) {
        for (x, y) in std::iter::once((&a.identity, &b.identity)).chain(a.template.iter().zip(&b.template)) {
            let (v, mac) = open_pair(x, y).unwrap();
            assert_eq!(mac, v * w.dep.params().element(mac_key));
        }
    }
    let (v, _) = open_pair(&d0.entries[2].identity, &d1.entries[2].identity).unwrap();
    assert_eq!(v.value(), 102);
}

#[test]
fn own_template_grants_and_wrong_identity_denies() {
    for metric in [Metric::Euclidean, Metric::Cosine] {
        let mut w = world(5, 6, vec![Mode::Top1; 2], metric, 2);
        let p = w.dep.params();
        let req = w.probe(3, 103);
        let (d, outs) = w.dep.authenticate(&req, Mode::Top1, 0, p.zero()).unwrap();
        assert_eq!(d.outcome, Outcome::Grant, "{metric}");
        assert_eq!(outs[0].metrics.rounds, outs[1].metrics.rounds);
        let req = w.probe(3, 101);
        let (d, _) = w.dep.authenticate(&req, Mode::Top1, 0, p.zero()).unwrap();
        assert_eq!((d.outcome, d.residual), (Outcome::Deny, Some(2)), "{metric}");
    }
}

#[test]
fn threshold_mode_follows_the_score() {
    let mut w = world(3, 4, vec![Mode::Threshold; 4], Metric::Euclidean, 3);
    let p = w.dep.params();
    let t: Vec<i128> = w.db[1].iter().map(|&x| x as i128).collect();
    let score: i128 = t.iter().map(|x| x * x).sum();
    for (tau, expect) in [(score, Outcome::Grant), (score + 1, Outcome::Deny), (score - 1, Outcome::Grant), (-score, Outcome::Grant)] {
        let req = w.probe(1, 0);
        let (d, _) = w.dep.authenticate(&req, Mode::Threshold, 1, p.from_signed(tau)).unwrap();
        assert_eq!(d.outcome, expect, "tau {tau}");
    }
}

fn session_shape(mode: Mode, m: usize, n: usize) -> SessionShape {
    SessionShape::authentication(mode, m, n)
}

#[test]
fn every_fault_target_aborts() {
    let (m, n) = (4, 5);
    let shape = session_shape(Mode::Top1, m, n);
    let mut rng = SeededRng::from_u64(9);
    for target in FaultTarget::ALL {
        for party in PartyId::both() {
            let mut w = world(m, n, vec![Mode::Top1], Metric::Euclidean, 4);
            let p = w.dep.params();
            let range = match target {
                FaultTarget::OpenDelta => shape.opens,
                FaultTarget::OpenConsistent => shape.auth_opens,
                FaultTarget::ComparisonPayload => shape.compares,
                FaultTarget::TripleShare => shape.correlations,
                FaultTarget::Y0Share | FaultTarget::ZShare => 1,
            };
            let index = (rng.next_u128() % range as u128) as usize;
            let error = (rng.next_u128() as i64 as i128) | 1;
            w.dep.servers[party.index()].set_faults(vec![FaultPlan { target, index, error, party }]);
            let req = w.probe(2, 102);
            let (d, outs) = w.dep.authenticate(&req, Mode::Top1, 0, p.zero()).unwrap();
            assert_eq!(d.outcome, Outcome::Abort, "{target} at {index} by {party}");
            assert!(outs.iter().all(|o| o.phase == twinauth_core::node::Phase::Aborted));
        }
    }
}

#[test]
fn cancelling_errors_still_abort() {
    for target in [FaultTarget::OpenConsistent, FaultTarget::TripleShare] {
        let mut w = world(3, 4, vec![Mode::Top1], Metric::Euclidean, 5);
        let p = w.dep.params();
        let faults = vec![
            FaultPlan { target, index: 1, error: 7, party: PartyId::P0 },
            FaultPlan { target, index: 4, error: -7, party: PartyId::P0 },
        ];
        w.dep.servers[0].set_faults(faults);
        let req = w.probe(0, 100);
        let (d, _) = w.dep.authenticate(&req, Mode::Top1, 0, p.zero()).unwrap();
        assert_eq!(d.outcome, Outcome::Abort, "{target}");
        assert_eq!(d.reason, Some(AbortReason::MacCheck));
    }
}

#[test]
fn fault_outside_the_session_is_harmless() {
    let mut w = world(3, 4, vec![Mode::Top1], Metric::Euclidean, 6);
    let p = w.dep.params();
    let shape = session_shape(Mode::Top1, 3, 4);
    w.dep.servers[1].set_faults(vec![FaultPlan {
        target: FaultTarget::OpenDelta,
        index: shape.opens,
        error: 1,
        party: PartyId::P1,
    }]);
    let req = w.probe(1, 101);
    let (d, outs) = w.dep.authenticate(&req, Mode::Top1, 0, p.zero()).unwrap();
    assert_eq!(d.outcome, Outcome::Grant);
    assert_eq!(outs[0].metrics.messages_sent as usize, 1 + 1 + 1 + 2 * 2 + 1 + 5);
}

#[test]
fn identical_inputs_give_identical_transcripts() {
    let run = || {
        let mut w = world(4, 4, vec![Mode::Top1], Metric::Euclidean, 7);
        w.dep.servers.iter_mut().for_each(|s| s.record_transcripts(true));
        let req = w.probe(2, 102);
        let (d, outs) = w.dep.authenticate(&req, Mode::Top1, 0, RingParams::DEFAULT.zero()).unwrap();
        (d, outs.map(|o| o.transcript.unwrap()))
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert_eq!(a.0.outcome, Outcome::Grant);
}

#[test]
fn metrics_do_not_depend_on_the_metric() {
    let shape = |metric| {
        let mut w = world(4, 6, vec![Mode::Top1], metric, 8);
        let req = w.probe(0, 100);
        let (_, outs) = w.dep.authenticate(&req, Mode::Top1, 0, RingParams::DEFAULT.zero()).unwrap();
        outs.map(|o| o.metrics)
    };
    assert_eq!(shape(Metric::Cosine), shape(Metric::Euclidean));
}

#[test]
fn servers_resume_from_saved_tapes() {
    let dir = tempfile::tempdir().unwrap();
    let mut w = world(3, 4, vec![Mode::Top1; 2], Metric::Euclidean, 10);
    let p = w.dep.params();
    let req = w.probe(0, 100);
    assert_eq!(w.dep.authenticate(&req, Mode::Top1, 0, p.zero()).unwrap().0.outcome, Outcome::Grant);
    let paths = [dir.path().join("p0.tape"), dir.path().join("p1.tape")];
    for (s, path) in w.dep.servers.iter().zip(&paths) {
        s.save(path).unwrap();
    }
    let seeds = [[1u8; 32], [2u8; 32]];
    w.dep.servers = [0, 1].map(|i| Server::load(&paths[i], seeds[i]).unwrap());
    let req = w.probe(2, 102);
    let (d, outs) = w.dep.authenticate(&req, Mode::Top1, 0, p.zero()).unwrap();
    assert_eq!(d.outcome, Outcome::Grant);
    assert_eq!(outs[0].session_id, 1);
    let req = w.probe(2, 102);
    assert!(w.dep.authenticate(&req, Mode::Top1, 0, p.zero()).is_err());
}

#[test]
fn mismatched_session_parameters_are_refused() {
    let mut w = world(2, 3, vec![Mode::Threshold], Metric::Euclidean, 11);
    let req = w.probe(0, 100);
    let p = w.dep.params();
    let mut one = [req[0].clone(), req[1].clone()];
    one[1].metric = Metric::Cosine;
    assert!(w.dep.authenticate(&one, Mode::Threshold, 0, p.zero()).is_err());
}
