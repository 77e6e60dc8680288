//! Live reconnection sessions.
//!
//! A session runs one simulation paced against the wall clock, islands at
//! the scheduled time and then waits for an operator's reconnect command.
//! Every PMU sample is streamed with the classifier's verdict for
//! reconnecting at that instant. After reconnection the run continues for
//! the configured span and the labeled outcome closes the stream.
//!
//! [`protocol`] documents the wire format, [`session`] the simulation
//! owner, and [`server`] the TCP (NDJSON) and WebSocket transport.

pub mod protocol;
pub mod server;
pub mod session;

pub use protocol::*;
pub use session::{LiveConfig, LiveError, LiveState, SessionHandle, SessionManager, SessionSpec};
