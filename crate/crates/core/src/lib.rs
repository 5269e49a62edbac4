pub mod client;
pub mod dealer;
pub mod error;
pub mod fss;
pub mod node;
pub mod protocols;
pub mod ring;
pub mod shares;
pub mod tape;
pub mod transport;

pub use error::{AbortReason, Error, Result};
