//! Wire protocol, version 1.
//!
//! Every message is one JSON object per line (NDJSON over TCP, one object
//! per text frame over WebSocket):
//!
//! ```text
//! {"v":1,"seq":12,"t":5.02,"session":"s1","kind":"sample","payload":{...}}
//! ```
//!
//! | field     | type   | meaning                                                        |
//! |-----------|--------|----------------------------------------------------------------|
//! | `v`       | int    | protocol version, always 1                                     |
//! | `seq`     | int    | per-session sequence number, strictly increasing from 1        |
//! | `t`       | float  | simulation time of the message, seconds                         |
//! | `session` | string | session id; absent on connection-level replies                  |
//! | `kind`    | string | `sample`, `verdict`, `event`, `phase`, `outcome`, `command`, `ack`, `error` |
//! | `payload` | object | kind-specific body, see the payload types below                 |
//!
//! Connection-level replies (errors before a subscription, the reply to
//! `start`) carry no `session` and are numbered by a per-connection counter.
//! Replies to session commands are broadcast on the session stream with `re`
//! set to the command's `seq`, so every subscriber sees one gap-free
//! sequence.
//!
//! Clients send `command` messages; their `seq` is chosen by the client and
//! echoed in the reply. `t` and `session` may be omitted.

use gridsync_core::dynsim::{SimEvent, StabilityLabel, UnstableReason};
use gridsync_core::netcase::BusId;
use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    pub v: u32,
    pub seq: u64,
    #[serde(default)]
    pub t: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<String>,
    #[serde(flatten)]
    pub body: Body,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum Body {
    Sample(SamplePayload),
    Verdict(VerdictPayload),
    Event(SimEvent),
    Phase(PhasePayload),
    Outcome(OutcomePayload),
    Command(CommandPayload),
    Ack(AckPayload),
    Error(ErrorPayload),
}

/// One PMU report. `features` is exactly the dataset feature vector:
/// `(|V| p.u., angle in degrees wrapped to (-180, 180])` per bus of `buses`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePayload {
    pub buses: Vec<BusId>,
    pub features: Vec<f64>,
    /// Measured bus frequency, Hz, same bus order; for display only.
    pub freq_hz: Vec<f64>,
}

/// Classifier output for the sample with the same `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerdictPayload {
    pub label: StabilityLabel,
    pub decision: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    PreIsland,
    Islanded,
    Reconnected,
    Terminated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePayload {
    pub phase: Phase,
}

/// Final label of the session's run. `trace_digest` is the SHA-256 of the
/// trace text export, for comparison with a batch run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomePayload {
    pub label: StabilityLabel,
    pub reason: Option<UnstableReason>,
    pub time: Option<f64>,
    pub in_service_fraction: f64,
    pub reconnect_time: Option<f64>,
    pub end_time: f64,
    pub trace_digest: String,
    /// Why the session ended early, if it did.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum CommandPayload {
    /// Attach to a session's stream (default: the newest session). The
    /// stream starts with the session's full history.
    Subscribe {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        session: Option<String>,
    },
    /// Close the tie breakers at the next simulation step.
    Reconnect,
    /// Start a new session; `ic` is an initial-condition id such as `"2.7"`.
    Start {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ic: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pacing: Option<f64>,
    },
    /// End the session now and report its outcome.
    Stop,
}

impl CommandPayload {
    pub fn name(&self) -> &'static str {
        match self {
            CommandPayload::Subscribe { .. } => "subscribe",
            CommandPayload::Reconnect => "reconnect",
            CommandPayload::Start { .. } => "start",
            CommandPayload::Stop => "stop",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AckPayload {
    pub command: String,
    /// `seq` of the acknowledged command.
    pub re: u64,
    /// Session the command applied to or created.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<String>,
    /// Simulation time at which the command took effect.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effective_t: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadMessage,
    WrongPhase,
    UnknownSession,
    NotSubscribed,
    SessionLimit,
    PlacementMismatch,
    Terminated,
    Internal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub re: Option<u64>,
}

impl WireMessage {
    pub fn command(seq: u64, command: CommandPayload) -> Self {
        WireMessage {
            v: PROTOCOL_VERSION,
            seq,
            t: 0.0,
            session: None,
            body: Body::Command(command),
        }
    }

    /// Single-line JSON, without the trailing newline.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("wire messages serialize")
    }

    pub fn from_line(line: &str) -> Result<Self, String> {
        let m: WireMessage = serde_json::from_str(line.trim()).map_err(|e| e.to_string())?;
        if m.v != PROTOCOL_VERSION {
            return Err(format!("unsupported protocol version {}", m.v));
        }
        Ok(m)
    }

    pub fn kind(&self) -> &'static str {
        match self.body {
            Body::Sample(_) => "sample",
            Body::Verdict(_) => "verdict",
            Body::Event(_) => "event",
            Body::Phase(_) => "phase",
            Body::Outcome(_) => "outcome",
            Body::Command(_) => "command",
            Body::Ack(_) => "ack",
            Body::Error(_) => "error",
        }
    }
}

/// Parses a recorded NDJSON stream, skipping blank lines.
pub fn parse_stream(text: &str) -> Result<Vec<WireMessage>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| WireMessage::from_line(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}
