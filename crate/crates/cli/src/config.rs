//! Deployment configuration, read from a TOML file of `key = value` lines.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use twinauth_core::client::Metric;
use twinauth_core::protocols::Mode;
use twinauth_core::ring::{RingElement, RingParams};
use twinauth_core::{Error, Result};

fn default_bits() -> u32 {
    64
}

fn default_n() -> usize {
    512
}

fn default_sessions() -> usize {
    1
}

fn default_metric() -> String {
    "cosine".into()
}

fn default_mode() -> String {
    "top1".into()
}

fn default_endpoints() -> [String; 2] {
    ["127.0.0.1:7400".into(), "127.0.0.1:7401".into()]
}

fn default_tapes() -> [PathBuf; 2] {
    ["party0.tape".into(), "party1.tape".into()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default = "default_bits")]
    pub l: u32,
    #[serde(default = "default_bits")]
    pub s: u32,
    #[serde(default = "default_n")]
    pub n: usize,
    pub m: usize,
    #[serde(default = "default_metric")]
    pub metric: String,
    #[serde(default = "default_mode")]
    pub mode: String,
    /// Required in threshold mode, in quantized score units.
    #[serde(default)]
    pub tau: Option<i64>,
    /// Authentication sessions provisioned by the dealer.
    #[serde(default = "default_sessions")]
    pub sessions: usize,
    /// Party 0 listens on its endpoint and party 1 dials it.
    #[serde(default = "default_endpoints")]
    pub endpoints: [String; 2],
    #[serde(default = "default_tapes")]
    pub tapes: [PathBuf; 2],
    /// Hex master seed, up to 32 bytes.
    #[serde(default)]
    pub seed: Option<String>,
}

impl Config {
    pub fn new(m: usize, n: usize) -> Config {
        Config {
            l: default_bits(),
            s: default_bits(),
            n,
            m,
            metric: default_metric(),
            mode: default_mode(),
            tau: None,
            sessions: default_sessions(),
            endpoints: default_endpoints(),
            tapes: default_tapes(),
            seed: None,
        }
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = fs::read_to_string(path)?;
        Config::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Config> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.params()?;
        self.seed()?;
        if self.m == 0 || self.n == 0 {
            return Err(Error::config("m and n must be positive"));
        }
        if self.sessions == 0 {
            return Err(Error::config("at least one session must be provisioned"));
        }
        let mode = self.mode()?;
        self.metric()?;
        match (mode, self.tau) {
            (Mode::Threshold, None) => return Err(Error::config("threshold mode needs tau")),
            (Mode::Top1, Some(_)) => return Err(Error::config("tau is only meaningful in threshold mode")),
            _ => {}
        }
        if self.endpoints[0] == self.endpoints[1] {
            return Err(Error::config("the two parties need distinct endpoints"));
        }
        if self.tapes[0] == self.tapes[1] {
            return Err(Error::config("the two parties need distinct tape paths"));
        }
        Ok(())
    }

    pub fn params(&self) -> Result<RingParams> {
        RingParams::new(self.l, self.s)
    }

    pub fn metric(&self) -> Result<Metric> {
        self.metric.parse()
    }

    pub fn mode(&self) -> Result<Mode> {
        self.mode.parse()
    }

    pub fn tau(&self) -> Result<RingElement> {
        Ok(self.params()?.from_signed(self.tau.unwrap_or(0) as i128))
    }

    pub fn seed(&self) -> Result<[u8; 32]> {
        parse_seed(self.seed.as_deref().unwrap_or(""))
    }

    pub fn tape_path(&self, dir: &Path, party: usize) -> PathBuf {
        dir.join(&self.tapes[party])
    }
}

/// Hex seed of at most 32 bytes, zero-padded on the right.
pub fn parse_seed(text: &str) -> Result<[u8; 32]> {
    let bytes = hex::decode(text.trim_start_matches("0x")).map_err(|e| Error::config(format!("seed: {e}")))?;
    if bytes.len() > 32 {
        return Err(Error::config("seed longer than 32 bytes"));
    }
    let mut seed = [0u8; 32];
    seed[..bytes.len()].copy_from_slice(&bytes);
    Ok(seed)
}
