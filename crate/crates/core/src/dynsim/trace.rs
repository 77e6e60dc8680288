//! Simulation traces and event logs, with their text exports.
//!
//! Trace file: the first line is `# gridsync-trace ` followed by a JSON
//! header; every following line is one sample, space separated, with columns
//! in the order listed by the header's `signals` array:
//! `time`, `vm.<bus>`..., `va.<bus>`..., `f.<bus>`..., `delta.<gen>`...,
//! `omega.<gen>`.... Voltage magnitudes are p.u., bus and rotor angles are
//! continuous degrees (not wrapped), frequencies are Hz and speeds are p.u.
//!
//! Event log: one `time action element` line per event, e.g.
//! `45 tie_close branch:14` or `46.2 shed_uv1 bus:8`.

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::netcase::{BranchId, BusId};

use super::relay::{GenTripCause, ShedCause};
use super::SimError;

pub const TRACE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub time: f64,
    pub vm: Vec<f64>,
    pub va_deg: Vec<f64>,
    pub freq_hz: Vec<f64>,
    pub rotor_angle_deg: Vec<f64>,
    pub speed_pu: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub buses: Vec<BusId>,
    /// Generator indices (case order) of the recorded machines.
    pub machines: Vec<usize>,
    pub sample_period: f64,
    pub nominal_freq: f64,
    pub samples: Vec<TraceSample>,
    /// Time of the algebraic solve failure that ended the run, if any.
    pub diverged_at: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct TraceHeader {
    version: u32,
    sample_period: f64,
    nominal_freq: f64,
    buses: Vec<BusId>,
    machines: Vec<usize>,
    diverged_at: Option<f64>,
    signals: Vec<String>,
}

const TRACE_MAGIC: &str = "# gridsync-trace ";

impl Trace {
    pub fn bus_position(&self, bus: BusId) -> Option<usize> {
        self.buses.iter().position(|b| *b == bus)
    }

    pub fn end_time(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.time)
    }

    /// Latest sample at or before `t`.
    pub fn sample_at_or_before(&self, t: f64) -> Option<&TraceSample> {
        let idx = self.samples.partition_point(|s| s.time <= t + 1e-9);
        idx.checked_sub(1).map(|i| &self.samples[i])
    }

    pub fn signal_names(&self) -> Vec<String> {
        let mut names = vec!["time".to_string()];
        for prefix in ["vm", "va", "f"] {
            names.extend(self.buses.iter().map(|b| format!("{prefix}.{b}")));
        }
        for prefix in ["delta", "omega"] {
            names.extend(self.machines.iter().map(|g| format!("{prefix}.g{g}")));
        }
        names
    }

    /// SHA-256 of the text export, hex encoded.
    pub fn digest(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory succeeds");
        hex::encode(Sha256::digest(&buf))
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        let header = TraceHeader {
            version: TRACE_VERSION,
            sample_period: self.sample_period,
            nominal_freq: self.nominal_freq,
            buses: self.buses.clone(),
            machines: self.machines.clone(),
            diverged_at: self.diverged_at,
            signals: self.signal_names(),
        };
        writeln!(w, "{TRACE_MAGIC}{}", serde_json::to_string(&header).expect("header serializes"))?;
        let mut line = String::new();
        for s in &self.samples {
            line.clear();
            line.push_str(&s.time.to_string());
            for v in s
                .vm
                .iter()
                .chain(&s.va_deg)
                .chain(&s.freq_hz)
                .chain(&s.rotor_angle_deg)
                .chain(&s.speed_pu)
            {
                line.push(' ');
                line.push_str(&v.to_string());
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self, SimError> {
        let bad = |m: String| SimError::Format(m);
        let mut lines = r.lines();
        let first = lines
            .next()
            .ok_or_else(|| bad("empty trace file".into()))?
            .map_err(|e| bad(e.to_string()))?;
        let json = first
            .strip_prefix(TRACE_MAGIC)
            .ok_or_else(|| bad("missing trace header".into()))?;
        let h: TraceHeader = serde_json::from_str(json).map_err(|e| bad(e.to_string()))?;
        if h.version != TRACE_VERSION {
            return Err(bad(format!("unsupported trace version {}", h.version)));
        }
        let nb = h.buses.len();
        let nm = h.machines.len();
        let width = 1 + 3 * nb + 2 * nm;
        let mut samples = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| bad(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| bad(format!("sample line {}: {e}", i + 2)))?;
            if vals.len() != width {
                return Err(bad(format!(
                    "sample line {} has {} columns, expected {width}",
                    i + 2,
                    vals.len()
                )));
            }
            samples.push(TraceSample {
                time: vals[0],
                vm: vals[1..1 + nb].to_vec(),
                va_deg: vals[1 + nb..1 + 2 * nb].to_vec(),
                freq_hz: vals[1 + 2 * nb..1 + 3 * nb].to_vec(),
                rotor_angle_deg: vals[1 + 3 * nb..1 + 3 * nb + nm].to_vec(),
                speed_pu: vals[1 + 3 * nb + nm..].to_vec(),
            });
        }
        Ok(Trace {
            buses: h.buses,
            machines: h.machines,
            sample_period: h.sample_period,
            nominal_freq: h.nominal_freq,
            samples,
            diverged_at: h.diverged_at,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum EventAction {
    TieOpen { branch: BranchId },
    TieClose { branch: BranchId },
    LineTrip { branch: BranchId, point: usize },
    LoadShed { bus: BusId, cause: ShedCause, point: usize },
    GenTrip { gen: usize, cause: GenTripCause, point: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub time: f64,
    #[serde(flatten)]
    pub action: EventAction,
}

impl EventAction {
    pub fn name(&self) -> String {
        match self {
            EventAction::TieOpen { .. } => "tie_open".into(),
            EventAction::TieClose { .. } => "tie_close".into(),
            EventAction::LineTrip { point, .. } => format!("oc_trip{}", point + 1),
            EventAction::LoadShed { cause, point, .. } => match cause {
                ShedCause::Undervoltage => format!("shed_uv{}", point + 1),
                ShedCause::Underfrequency => format!("shed_uf{}", point + 1),
            },
            EventAction::GenTrip { cause, point, .. } => match cause {
                GenTripCause::Underfrequency => format!("gen_uf{}", point + 1),
                GenTripCause::Overfrequency => format!("gen_of{}", point + 1),
            },
        }
    }

    pub fn element(&self) -> String {
        match self {
            EventAction::TieOpen { branch }
            | EventAction::TieClose { branch }
            | EventAction::LineTrip { branch, .. } => format!("branch:{branch}"),
            EventAction::LoadShed { bus, .. } => format!("bus:{bus}"),
            EventAction::GenTrip { gen, .. } => format!("gen:{gen}"),
        }
    }

    fn parse(name: &str, element: &str) -> Option<Self> {
        let (kind, id) = element.split_once(':')?;
        let id: u32 = id.parse().ok()?;
        let stage = |prefix: &str| -> Option<usize> {
            name.strip_prefix(prefix)?.parse::<usize>().ok()?.checked_sub(1)
        };
        Some(match (name, kind) {
            ("tie_open", "branch") => EventAction::TieOpen { branch: id },
            ("tie_close", "branch") => EventAction::TieClose { branch: id },
            (_, "branch") => EventAction::LineTrip { branch: id, point: stage("oc_trip")? },
            (_, "bus") => {
                if let Some(point) = stage("shed_uv") {
                    EventAction::LoadShed { bus: id, cause: ShedCause::Undervoltage, point }
                } else {
                    EventAction::LoadShed { bus: id, cause: ShedCause::Underfrequency, point: stage("shed_uf")? }
                }
            }
            (_, "gen") => {
                if let Some(point) = stage("gen_uf") {
                    EventAction::GenTrip { gen: id as usize, cause: GenTripCause::Underfrequency, point }
                } else {
                    EventAction::GenTrip { gen: id as usize, cause: GenTripCause::Overfrequency, point: stage("gen_of")? }
                }
            }
            _ => return None,
        })
    }
}

impl fmt::Display for SimEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.time, self.action.name(), self.action.element())
    }
}

pub fn write_events(events: &[SimEvent], mut w: impl Write) -> std::io::Result<()> {
    for e in events {
        writeln!(w, "{e}")?;
    }
    Ok(())
}

pub fn read_events(r: impl BufRead) -> Result<Vec<SimEvent>, SimError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| SimError::Format(e.to_string()))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let parsed = (parts.len() == 3)
            .then(|| Some((parts[0].parse::<f64>().ok()?, EventAction::parse(parts[1], parts[2])?)))
            .flatten();
        let (time, action) =
            parsed.ok_or_else(|| SimError::Format(format!("bad event on line {}: `{line}`", i + 1)))?;
        out.push(SimEvent { time, action });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn event_lines_round_trip() {
        let events = vec![
            SimEvent { time: 5.0, action: EventAction::TieOpen { branch: 14 } },
            SimEvent { time: 45.0, action: EventAction::TieClose { branch: 15 } },
            SimEvent { time: 45.1, action: EventAction::LineTrip { branch: 14, point: 3 } },
            SimEvent {
                time: 46.25,
                action: EventAction::LoadShed { bus: 8, cause: ShedCause::Underfrequency, point: 1 },
            },
            SimEvent {
                time: 50.0,
                action: EventAction::GenTrip { gen: 4, cause: GenTripCause::Overfrequency, point: 0 },
            },
        ];
        let mut buf = Vec::new();
        write_events(&events, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("5 tie_open branch:14\n"));
        assert_eq!(read_events(&buf[..]).unwrap(), events);
    }

    #[test]
    fn malformed_event_is_rejected() {
        assert!(read_events("5 tie_open bus\n".as_bytes()).is_err());
    }
}
