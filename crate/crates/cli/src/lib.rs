pub mod bench;
pub mod commands;
pub mod config;

pub use bench::{BenchReport, BenchRow};
pub use commands::{run_loopback, RunOptions, RunSummary};
pub use config::Config;
