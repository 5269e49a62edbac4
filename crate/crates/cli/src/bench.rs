//! Benchmark report and micro-benchmark sweeps.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use statrs::statistics::Statistics;
use twinauth_core::dealer::{deal_authenticated, deal_masked, gen_mult_corr, gen_secip_corr, gen_seccmp_corr};
use twinauth_core::protocols::{run_two_party, Session};
use twinauth_core::ring::{RingElement, RingParams, SeededRng};
use twinauth_core::transport::ChannelMetrics;
use twinauth_core::{Error, Result};

pub const SCHEMA: &str = include_str!("../schema/bench_report.schema.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub phase: String,
    pub party: u8,
    pub bytes: u64,
    pub rounds: u64,
    pub ms: f64,
    pub ms_stddev: f64,
    pub trials: u32,
    pub ops: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub l: u32,
    pub s: u32,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn new(params: RingParams) -> Self {
        BenchReport { l: params.l(), s: params.s(), rows: Vec::new() }
    }

    /// Adds one row per party from per-trial metrics and timings.
    pub fn record(&mut self, phase: &str, metrics: [ChannelMetrics; 2], times_ms: &[f64], ops: &[(&str, u64)]) {
        let ms = times_ms.iter().mean();
        let sd = if times_ms.len() > 1 { times_ms.iter().std_dev() } else { 0.0 };
        for (party, m) in metrics.iter().enumerate() {
            self.rows.push(BenchRow {
                phase: phase.to_string(),
                party: party as u8,
                bytes: m.bytes_sent,
                rounds: m.rounds,
                ms,
                ms_stddev: sd,
                trials: times_ms.len() as u32,
                ops: ops.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            });
        }
    }

    pub fn row(&self, phase: &str, party: u8) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.phase == phase && r.party == party)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::config(format!("csv: {e}"));
        w.write_record(["phase", "party", "bytes", "rounds", "ms"]).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.phase.clone(),
                r.party.to_string(),
                r.bytes.to_string(),
                r.rounds.to_string(),
                format!("{:.3}", r.ms),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::config(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `bench.csv` and `bench.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("bench.csv"), self.to_csv()?)?;
        fs::write(dir.join("bench.json"), self.to_json())?;
        Ok(())
    }
}

fn random_vec(p: RingParams, n: usize, rng: &mut SeededRng) -> Vec<RingElement> {
    (0..n).map(|_| p.element(rng.next_u128())).collect()
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Inner product of length `n`, batched into one open, against the
/// open-then-sum baseline on the same inputs.
pub fn bench_secip(report: &mut BenchReport, params: RingParams, n: usize, trials: u32, seed: u64) -> Result<()> {
    let mut rng = SeededRng::from_u64(seed);
    let mac_key = params.element(rng.next_u128() & ((1u128 << params.s()) - 1));
    let mut ours = Vec::new();
    let mut base = Vec::new();
    let mut metrics = ([ChannelMetrics::default(); 2], [ChannelMetrics::default(); 2]);
    for _ in 0..trials.max(1) {
        let d = random_vec(params, n, &mut rng);
        let t = random_vec(params, n, &mut rng);
        let (dp, lx, lpx) = deal_authenticated(&d, mac_key, &mut rng);
        let (tp, ly) = deal_masked(&t, &mut rng);
        let (lz, lpz) = (params.element(rng.next_u128()), params.element(rng.next_u128()));
        let corr = gen_secip_corr(&lx, &lpx, &ly, lz, lpz, &mut rng)?;
        let mut mults = [Vec::new(), Vec::new()];
        for i in 0..n {
            for lhs in [lx[i], lpx[i]] {
                let [a, b] = gen_mult_corr(lhs, ly[i], params.element(rng.next_u128()), &mut rng);
                mults[0].push(a);
                mults[1].push(b);
            }
        }
        let runs = run_two_party(|party, ch| -> Result<(ChannelMetrics, ChannelMetrics, f64, f64)> {
            let i = party.index();
            let mut s = Session::new(party, params, 0, ch, SeededRng::from_u64(i as u64));
            let start = Instant::now();
            s.secure_inner_product(&dp[i], &tp[i], corr[i].clone())?;
            let t_ours = elapsed_ms(start);
            let after_ours = s.metrics();
            let start = Instant::now();
            s.open_then_sum_inner_product(&dp[i], &tp[i], mults[i].clone())?;
            let t_base = elapsed_ms(start);
            Ok((after_ours, s.metrics().since(&after_ours), t_ours, t_base))
        });
        let [r0, r1] = runs;
        let (r0, r1) = (r0?, r1?);
        metrics = ([r0.0, r1.0], [r0.1, r1.1]);
        ours.push(r0.2.max(r1.2));
        base.push(r0.3.max(r1.3));
    }
    report.record(&format!("secip/n={n}"), metrics.0, &ours, &[("secip", 1), ("n", n as u64)]);
    report.record(&format!("secip-baseline/n={n}"), metrics.1, &base, &[("mult", 2 * n as u64), ("n", n as u64)]);
    Ok(())
}

/// A batch of comparisons opened together in one round.
pub fn bench_seccmp(report: &mut BenchReport, params: RingParams, batch: usize, trials: u32, seed: u64) -> Result<()> {
    let mut rng = SeededRng::from_u64(seed);
    let mac_key = params.element(rng.next_u128() & ((1u128 << params.s()) - 1));
    let mut times = Vec::new();
    let mut metrics = [ChannelMetrics::default(); 2];
    for _ in 0..trials.max(1) {
        let xs: Vec<_> = (0..batch).map(|_| params.from_signed((rng.next_u128() as i64 >> 2) as i128)).collect();
        let (xp, lx) = deal_masked(&xs, &mut rng);
        let mut corrs = [Vec::new(), Vec::new()];
        for &l in &lx {
            let [a, b] =
                gen_seccmp_corr(l, mac_key, params.element(rng.next_u128()), params.element(rng.next_u128()), &mut rng)?;
            corrs[0].push(a);
            corrs[1].push(b);
        }
        let [r0, r1] = run_two_party(|party, ch| -> Result<(ChannelMetrics, f64)> {
            let i = party.index();
            let mut s = Session::new(party, params, 0, ch, SeededRng::from_u64(i as u64));
            let start = Instant::now();
            s.secure_compare_batch(&xp[i], corrs[i].clone())?;
            Ok((s.metrics(), elapsed_ms(start)))
        });
        let (r0, r1) = (r0?, r1?);
        metrics = [r0.0, r1.0];
        times.push(r0.1.max(r1.1));
    }
    report.record(&format!("seccmp/batch={batch}"), metrics, &times, &[("seccmp", batch as u64)]);
    Ok(())
}

/// Powers of two from `2^lo` to `2^hi` inclusive.
pub fn sweep(lo: u32, hi: u32) -> Vec<usize> {
    (lo..=hi).map(|k| 1usize << k).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn secip_bytes_are_flat_and_beat_the_baseline() {
        let p = RingParams::DEFAULT;
        let mut report = BenchReport::new(p);
        for n in [8, 64] {
            bench_secip(&mut report, p, n, 1, n as u64).unwrap();
        }
        let small = report.row("secip/n=8", 0).unwrap();
        let large = report.row("secip/n=64", 1).unwrap();
        assert_eq!((small.bytes, small.rounds), (41, 1));
        assert_eq!((large.bytes, large.rounds), (41, 1));
        assert_eq!(report.row("secip-baseline/n=64", 0).unwrap().bytes, 64 * 32 + 9);
    }

    #[test]
    fn csv_has_the_documented_columns() {
        let p = RingParams::DEFAULT;
        let mut report = BenchReport::new(p);
        bench_seccmp(&mut report, p, 4, 2, 1).unwrap();
        let csv = report.to_csv().unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("phase,party,bytes,rounds,ms"));
        assert!(lines.next().unwrap().starts_with("seccmp/batch=4,0,137,1,"));
        let back: BenchReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);
    }
}
