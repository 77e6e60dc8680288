//! Post-run stability labeling.
//!
//! A run is unstable if any of these holds, checked on the sampled trace:
//!
//! * (a) the algebraic network solve failed;
//! * (b) after reconnection, an energized bus stays below `v_collapse` for at
//!   least `collapse_time`;
//! * (c) two synchronized machines drift more than `pole_slip_deg` apart;
//! * (d) an energized bus frequency stays outside the band
//!   `nominal ± freq_dev_hz` for at least `freq_time`;
//! * (e) the run reconnected, and at the end fewer than `survival_fraction`
//!   of all buses are in service.
//!
//! The reported reason is the rule that fired first; ties go to the earlier
//! rule in the list above.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::netcase::NetworkCase;

use super::network::Topology;
use super::trace::{EventAction, SimEvent, Trace};

const TIME_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelThresholds {
    pub v_collapse: f64,
    pub collapse_time: f64,
    pub pole_slip_deg: f64,
    pub freq_dev_hz: f64,
    pub freq_time: f64,
    pub survival_fraction: f64,
}

impl Default for LabelThresholds {
    fn default() -> Self {
        LabelThresholds {
            v_collapse: 0.6,
            collapse_time: 1.0,
            pole_slip_deg: 180.0,
            freq_dev_hz: 3.0,
            freq_time: 1.0,
            survival_fraction: 0.994,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilityLabel {
    Stable,
    Unstable,
}

impl StabilityLabel {
    /// `+1` for stable, `-1` for unstable.
    pub fn as_class(self) -> i8 {
        match self {
            StabilityLabel::Stable => 1,
            StabilityLabel::Unstable => -1,
        }
    }

    pub fn from_class(c: i8) -> Option<Self> {
        match c {
            1 => Some(StabilityLabel::Stable),
            -1 => Some(StabilityLabel::Unstable),
            _ => None,
        }
    }
}

impl fmt::Display for StabilityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StabilityLabel::Stable => "stable",
            StabilityLabel::Unstable => "unstable",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnstableReason {
    NonConvergence,
    VoltageCollapse,
    PoleSlip,
    FrequencyExcursion,
    Survival,
}

impl fmt::Display for UnstableReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UnstableReason::NonConvergence => "non_convergence",
            UnstableReason::VoltageCollapse => "voltage_collapse",
            UnstableReason::PoleSlip => "pole_slip",
            UnstableReason::FrequencyExcursion => "frequency_excursion",
            UnstableReason::Survival => "survival",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelResult {
    pub label: StabilityLabel,
    pub reason: Option<UnstableReason>,
    /// When the deciding rule fired.
    pub time: Option<f64>,
    /// In-service bus fraction at the end of the run.
    pub in_service_fraction: f64,
}

/// Tracks per-machine 360-degree offsets so that angle differences between
/// synchronized machines are measured without wrapping artifacts. When
/// separate groups are joined, each joining group is shifted by whole turns
/// to sit nearest the group of the lowest-indexed machine.
struct SlipTracker {
    offset: Vec<f64>,
    group: Vec<Option<usize>>,
}

impl SlipTracker {
    fn new(n: usize) -> Self {
        SlipTracker {
            offset: vec![0.0; n],
            group: vec![None; n],
        }
    }

    /// `members` maps a component label to the online machines (trace
    /// positions) it contains.
    fn regroup(&mut self, members: &BTreeMap<usize, Vec<usize>>, angles: &[f64]) {
        let mut new_group = vec![None; self.offset.len()];
        for ms in members.values() {
            let anchor = ms[0];
            let anchor_old = self.group[anchor];
            let mut shifted: BTreeMap<Option<usize>, f64> = BTreeMap::new();
            shifted.insert(anchor_old, 0.0);
            for &m in ms {
                let old = self.group[m];
                let shift = *shifted.entry(old).or_insert_with(|| {
                    let here = angles[m] + self.offset[m];
                    let there = angles[anchor] + self.offset[anchor];
                    360.0 * ((there - here) / 360.0).round()
                });
                self.offset[m] += shift;
                new_group[m] = Some(anchor);
            }
        }
        self.group = new_group;
    }

    fn max_spread(&self, members: &BTreeMap<usize, Vec<usize>>, angles: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for ms in members.values() {
            let adj = ms.iter().map(|m| angles[*m] + self.offset[*m]);
            let (lo, hi) = adj.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), a| {
                (lo.min(a), hi.max(a))
            });
            worst = worst.max(hi - lo);
        }
        worst
    }
}

/// Sustained-violation timer for one signal.
fn sustain(start: &mut Option<f64>, violated: bool, t: f64, hold: f64) -> bool {
    if !violated {
        *start = None;
        return false;
    }
    let s = *start.get_or_insert(t);
    t - s >= hold - TIME_EPS
}

/// Labels a finished run. `events` must be the run's full event log.
pub fn label_outcome(
    case: &NetworkCase,
    trace: &Trace,
    events: &[SimEvent],
    th: &LabelThresholds,
) -> LabelResult {
    let mut events: Vec<&SimEvent> = events.iter().collect();
    events.sort_by(|a, b| a.time.total_cmp(&b.time));
    let reconnect_time = events
        .iter()
        .find(|e| matches!(e.action, EventAction::TieClose { .. }))
        .map(|e| e.time);

    let index = case.bus_index();
    let bus_pos: Vec<Option<usize>> = case.buses.iter().map(|b| trace.bus_position(b.id)).collect();
    let machine_pos: BTreeMap<usize, usize> =
        trace.machines.iter().enumerate().map(|(p, g)| (*g, p)).collect();

    let mut topo = Topology::initial(case);
    let mut comp = topo.components(case);
    let mut energized = topo.energized(case, &comp);
    let mut slip = SlipTracker::new(trace.machines.len());
    let mut dirty = true;
    let mut next_event = 0;

    let mut v_timer = vec![None; case.buses.len()];
    let mut f_timer = vec![None; case.buses.len()];
    let f_lo = trace.nominal_freq - th.freq_dev_hz;
    let f_hi = trace.nominal_freq + th.freq_dev_hz;

    let mut hits: Vec<(f64, UnstableReason)> = Vec::new();
    if let Some(t) = trace.diverged_at {
        hits.push((t, UnstableReason::NonConvergence));
    }
    let mut got_v = false;
    let mut got_slip = false;
    let mut got_f = false;

    for s in &trace.samples {
        while next_event < events.len() && events[next_event].time <= s.time + TIME_EPS {
            dirty |= topo.apply(case, &events[next_event].action);
            next_event += 1;
        }
        if dirty {
            comp = topo.components(case);
            energized = topo.energized(case, &comp);
        }

        let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (g, gen) in case.generators.iter().enumerate() {
            if let (true, Some(&p)) = (topo.gen_online[g], machine_pos.get(&g)) {
                members.entry(comp[index[&gen.bus]]).or_default().push(p);
            }
        }
        if dirty {
            slip.regroup(&members, &s.rotor_angle_deg);
            dirty = false;
        }
        if !got_slip && slip.max_spread(&members, &s.rotor_angle_deg) > th.pole_slip_deg {
            got_slip = true;
            hits.push((s.time, UnstableReason::PoleSlip));
        }

        let after_reconnect = reconnect_time.is_some_and(|t| s.time >= t - TIME_EPS);
        for (i, pos) in bus_pos.iter().enumerate() {
            let Some(p) = *pos else { continue };
            let live = energized[i];
            if !got_v
                && sustain(
                    &mut v_timer[i],
                    live && after_reconnect && s.vm[p] < th.v_collapse,
                    s.time,
                    th.collapse_time,
                )
            {
                got_v = true;
                hits.push((s.time, UnstableReason::VoltageCollapse));
            }
            let f = s.freq_hz[p];
            if !got_f && sustain(&mut f_timer[i], live && !(f_lo..=f_hi).contains(&f), s.time, th.freq_time) {
                got_f = true;
                hits.push((s.time, UnstableReason::FrequencyExcursion));
            }
        }
    }
    for e in &events[next_event..] {
        topo.apply(case, &e.action);
    }

    let in_service = topo.bus_in_service(case);
    let in_service_fraction =
        in_service.iter().filter(|x| **x).count() as f64 / case.buses.len().max(1) as f64;
    if reconnect_time.is_some() && in_service_fraction < th.survival_fraction {
        hits.push((trace.end_time(), UnstableReason::Survival));
    }

    let first = hits
        .into_iter()
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    LabelResult {
        label: if first.is_some() {
            StabilityLabel::Unstable
        } else {
            StabilityLabel::Stable
        },
        reason: first.map(|h| h.1),
        time: first.map(|h| h.0),
        in_service_fraction,
    }
}
