use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use twinauth_cli::bench::{bench_seccmp, bench_secip, sweep, BenchReport};
use twinauth_cli::commands::{
    cmd_client, cmd_dealer, cmd_server_authenticate, cmd_server_enroll, cmd_verify, run_loopback, synth_templates,
    write_templates, RunOptions,
};
use twinauth_cli::config::{parse_seed, Config};
use twinauth_core::client::Phase;
use twinauth_core::node::{Decision, FaultPlan, Outcome};
use twinauth_core::ring::SeededRng;
use twinauth_core::shares::PartyId;
use twinauth_core::{Error, Result};

#[derive(Parser)]
#[command(name = "twinauth", version, about = "Two-server biometric authentication")]
struct Cli {
    /// Deployment configuration (TOML key = value lines).
    #[arg(long, global = true, default_value = "twinauth.toml")]
    config: PathBuf,
    /// Overrides the configured mode.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Overrides the configured metric.
    #[arg(long, global = true)]
    metric: Option<String>,
    /// Overrides the configured master seed (hex).
    #[arg(long, global = true)]
    seed: Option<String>,
    /// Working directory for tapes, requests and reports.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate both correlation tapes.
    Dealer {
        /// Re-check every correlation before writing.
        #[arg(long)]
        audit: bool,
    },
    /// Prepare and secret-share templates for the servers.
    Client {
        #[command(subcommand)]
        action: ClientAction,
    },
    /// Run one server.
    Server {
        #[arg(long)]
        party: u8,
        #[command(subcommand)]
        action: ServerAction,
    },
    /// Reconstruct the decision from both result shares.
    Verify {
        #[arg(long, num_args = 2, required = true)]
        results: Vec<PathBuf>,
    },
    /// Dealer, client, both servers over TCP loopback and the verifier in one process.
    Run {
        #[arg(long, default_value_t = 0)]
        probe: usize,
        #[arg(long)]
        claimed: Option<u64>,
        /// `target:index:+e`, applied by the party given with --fault-party.
        #[arg(long)]
        fault: Option<String>,
        #[arg(long, default_value_t = 0)]
        fault_party: u8,
    },
    /// Micro-benchmark sweeps and an end-to-end run.
    Bench {
        #[arg(long, value_enum, default_value_t = Suite::All)]
        suite: Suite,
        #[arg(long, default_value_t = 10)]
        trials: u32,
        /// Largest sweep exponent (sizes run from 2^8).
        #[arg(long, default_value_t = 14)]
        max_log: u32,
    },
}

#[derive(Subcommand)]
enum ClientAction {
    /// Write random templates as `identity,v1,...,vn` rows.
    Synth {
        #[arg(long)]
        templates: PathBuf,
    },
    Register {
        #[arg(long)]
        templates: PathBuf,
    },
    Authenticate {
        #[arg(long)]
        template: PathBuf,
        /// Session the request is for; keeps client randomness fresh.
        #[arg(long, default_value_t = 0)]
        session: u32,
    },
}

#[derive(Subcommand)]
enum ServerAction {
    Enroll {
        #[arg(long)]
        requests: PathBuf,
    },
    Authenticate {
        #[arg(long)]
        request: PathBuf,
        #[arg(long)]
        result: PathBuf,
        /// Database entry compared against in threshold mode.
        #[arg(long, default_value_t = 0)]
        entry: u32,
        #[arg(long)]
        fault: Option<String>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Suite {
    Secip,
    Seccmp,
    E2e,
    All,
}

const EXIT_DENY: u8 = 1;
const EXIT_ABORT: u8 = 2;
const EXIT_ERROR: u8 = 3;

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = if cli.config.exists() {
        Config::load(&cli.config)?
    } else {
        return Err(Error::config(format!("config file {} not found", cli.config.display())));
    };
    if let Some(m) = &cli.mode {
        cfg.mode = m.clone();
    }
    if let Some(m) = &cli.metric {
        cfg.metric = m.clone();
    }
    if let Some(s) = &cli.seed {
        parse_seed(s)?;
        cfg.seed = Some(s.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn decision_exit(d: &Decision) -> ExitCode {
    match d.outcome {
        Outcome::Grant => {
            println!("GRANT residual=0");
            ExitCode::SUCCESS
        }
        Outcome::Deny => {
            println!("DENY residual={}", d.residual.unwrap_or_default());
            ExitCode::from(EXIT_DENY)
        }
        Outcome::Abort => {
            match d.reason {
                Some(r) => println!("ABORT {r}"),
                None => println!("ABORT result shares disagree"),
            }
            ExitCode::from(EXIT_ABORT)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = load_config(&cli)?;
    let out = &cli.out;
    match cli.command {
        Command::Dealer { audit } => {
            if let Some(r) = cmd_dealer(&cfg, out, audit)? {
                println!(
                    "audit ok: {} multiplications, {} inner products, {} comparisons, {} MAC check pairs",
                    r.mults, r.secips, r.seccmps, r.mac_aux
                );
            }
            println!("wrote {} and {}", cfg.tape_path(out, 0).display(), cfg.tape_path(out, 1).display());
        }
        Command::Client { action } => match action {
            ClientAction::Synth { templates } => {
                let mut rng = SeededRng::new(cfg.seed()?).derive("templates");
                write_templates(&templates, &synth_templates(cfg.metric()?, cfg.m, cfg.n, &mut rng))?;
            }
            ClientAction::Register { templates } => {
                let paths = cmd_client(&cfg, Phase::Registration, &templates, 0, out)?;
                println!("wrote {} and {}", paths[0].display(), paths[1].display());
            }
            ClientAction::Authenticate { template, session } => {
                let paths = cmd_client(&cfg, Phase::Authentication, &template, session, out)?;
                println!("wrote {} and {}", paths[0].display(), paths[1].display());
            }
        },
        Command::Server { party, action } => {
            let party = PartyId::new(party)?;
            match action {
                ServerAction::Enroll { requests } => {
                    let m = cmd_server_enroll(&cfg, party, out, &requests)?;
                    println!("{party}: database holds {m} entries");
                }
                ServerAction::Authenticate { request, result, entry, fault } => {
                    let faults = fault.map(|f| FaultPlan::parse(&f, party)).transpose()?.into_iter().collect();
                    let o = cmd_server_authenticate(&cfg, party, out, &request, entry, faults, &result)?;
                    let transcript = o.transcript.map(hex::encode).unwrap_or_default();
                    println!(
                        "{party}: session {} {:?} bytes={} rounds={} transcript={transcript}",
                        o.session_id, o.phase, o.metrics.bytes_sent, o.metrics.rounds
                    );
                    if let twinauth_core::node::ResultShare::Abort(r) = o.result {
                        println!("ABORT {r}");
                        return Ok(ExitCode::from(EXIT_ABORT));
                    }
                }
            }
        }
        Command::Verify { results } => {
            return Ok(decision_exit(&cmd_verify(&cfg, [&results[0], &results[1]])?));
        }
        Command::Run { probe, claimed, fault, fault_party } => {
            let party = PartyId::new(fault_party)?;
            let faults = fault.map(|f| FaultPlan::parse(&f, party)).transpose()?.into_iter().collect();
            let summary = run_loopback(&cfg, &RunOptions { probe, claimed, faults, ephemeral: false })?;
            summary.report.write(out)?;
            println!("wall time {:.1} ms; report in {}", summary.wall_ms, out.join("bench.csv").display());
            return Ok(decision_exit(&summary.decision));
        }
        Command::Bench { suite, trials, max_log } => {
            let params = cfg.params()?;
            let mut report = BenchReport::new(params);
            let sizes = sweep(8, max_log.max(8));
            if matches!(suite, Suite::Secip | Suite::All) {
                for &n in &sizes {
                    bench_secip(&mut report, params, n, trials, n as u64)?;
                }
            }
            if matches!(suite, Suite::Seccmp | Suite::All) {
                for &b in &sizes {
                    bench_seccmp(&mut report, params, b, trials, b as u64)?;
                }
            }
            if matches!(suite, Suite::E2e | Suite::All) {
                let summary = run_loopback(&cfg, &RunOptions { ephemeral: true, ..Default::default() })?;
                report.rows.extend(summary.report.rows);
            }
            report.write(out)?;
            print!("{}", report.to_csv()?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(Error::Abort(reason)) => {
            eprintln!("ABORT {reason}");
            ExitCode::from(EXIT_ABORT)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
