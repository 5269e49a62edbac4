use std::io;

use thiserror::Error;

use crate::tape::TapeError;
use crate::transport::TransportError;

/// Reasons a two-party session stops without producing result shares.
///
/// Every variant is a detected deviation from the protocol, never an
/// authentication failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AbortReason {
    /// The batched MAC check found a nonzero combination.
    MacCheck,
    /// A commitment did not open to the revealed value.
    Commitment,
    /// The two parties do not agree on the opened masked values.
    ViewMismatch,
    /// The peer reported an abort of its own.
    PeerAbort,
}

impl AbortReason {
    pub fn code(self) -> u8 {
        match self {
            AbortReason::MacCheck => 1,
            AbortReason::Commitment => 2,
            AbortReason::ViewMismatch => 3,
            AbortReason::PeerAbort => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => AbortReason::MacCheck,
            2 => AbortReason::Commitment,
            3 => AbortReason::ViewMismatch,
            4 => AbortReason::PeerAbort,
            _ => return None,
        })
    }
}

impl std::fmt::Display for AbortReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let text = match self {
            AbortReason::MacCheck => "MAC check failed",
            AbortReason::Commitment => "commitment did not open",
            AbortReason::ViewMismatch => "parties disagree on opened values",
            AbortReason::PeerAbort => "peer aborted",
        };
        f.write_str(text)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("ring parameter mismatch")]
    ParamMismatch,
    #[error("protocol inconsistency: public deltas differ between shares")]
    DeltaMismatch,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("correlation exhausted: {0}")]
    CorrelationExhausted(&'static str),
    #[error("decode error: {0}")]
    Decode(String),
    #[error("preprocessing error: {0}")]
    Preprocess(String),
    #[error("correlation audit failed: {0}")]
    Audit(String),
    #[error("session aborted: {0}")]
    Abort(AbortReason),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn is_abort(&self) -> bool {
        matches!(self, Error::Abort(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
