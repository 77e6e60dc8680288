//! Definite-time relay ladders: line overcurrent, bus undervoltage and
//! underfrequency load shedding, and generator under/over-frequency.
//!
//! A point operates once its quantity has violated the pickup continuously
//! for the point's delay. When several points of one element are violated the
//! fastest one operates first, giving the inverse-time character of a ladder.

use std::collections::BTreeMap;

use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::netcase::{BranchId, BusId, NetworkCase};
use crate::rng::rng_for;

/// Slack for accumulated floating-point timer error.
const TIMER_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OvercurrentPoint {
    /// Pickup as a percentage of the branch current limit.
    pub pickup_pct: f64,
    pub delay: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UndervoltagePoint {
    pub pickup_pu: f64,
    pub delay: f64,
}

/// One underfrequency shedding stage; `delays[g]` applies to bus group `g`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnderfrequencyPoint {
    pub pickup_hz: f64,
    pub delays: Vec<f64>,
}

/// Generator frequency band; the delay is `dial * y` with `y` the
/// generator's time-dial multiplier.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenFrequencyPoint {
    pub under_hz: f64,
    pub over_hz: f64,
    pub dial: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelayConfig {
    pub overcurrent: Vec<OvercurrentPoint>,
    pub undervoltage_ls: Vec<UndervoltagePoint>,
    pub underfrequency_ls: Vec<UnderfrequencyPoint>,
    pub gen_frequency: Vec<GenFrequencyPoint>,
    /// Underfrequency delay column per bus; unlisted buses use column 0.
    pub bus_groups: BTreeMap<BusId, usize>,
    /// Time-dial multiplier per generator (case order); missing entries are 1.
    pub gen_time_dial: Vec<f64>,
}

#[derive(Debug, thiserror::Error)]
#[error("invalid relay configuration: {0}")]
pub struct RelayConfigError(pub String);

impl RelayConfig {
    /// No protection at all.
    pub fn none() -> Self {
        RelayConfig {
            overcurrent: vec![],
            undervoltage_ls: vec![],
            underfrequency_ls: vec![],
            gen_frequency: vec![],
            bus_groups: BTreeMap::new(),
            gen_time_dial: vec![],
        }
    }

    /// The overcurrent ladder 100/125/137.5/150 % with 5/0.2/0.15/0.1 s, the
    /// shedding stages 0.92/0.88/0.75 p.u. and 49.5/49/48.5 Hz, and the generator
    /// bands 48.5-51.5, 47.5-52.5, 46-54 Hz with dials y, y/2, y/4. Frequency
    /// settings are stated for 50 Hz and shifted for other nominal
    /// frequencies. Buses are assigned to the four delay columns round-robin
    /// in id order, and each generator draws `y` from {1, 2, 3, 4}.
    pub fn standard(case: &NetworkCase, seed: u64) -> Self {
        let shift = case.nominal_freq - 50.0;
        let hz = |f: f64| f + shift;
        let mut ids: Vec<BusId> = case.buses.iter().map(|b| b.id).collect();
        ids.sort_unstable();
        let bus_groups = ids.iter().enumerate().map(|(i, b)| (*b, i % 4)).collect();
        let mut rng = rng_for(seed, 0x475f_5245_4c41_59, 0);
        let gen_time_dial = case
            .generators
            .iter()
            .map(|_| rng.random_range(1..=4u32) as f64)
            .collect();
        RelayConfig {
            overcurrent: vec![
                OvercurrentPoint { pickup_pct: 100.0, delay: 5.0 },
                OvercurrentPoint { pickup_pct: 125.0, delay: 0.2 },
                OvercurrentPoint { pickup_pct: 137.5, delay: 0.15 },
                OvercurrentPoint { pickup_pct: 150.0, delay: 0.1 },
            ],
            undervoltage_ls: vec![
                UndervoltagePoint { pickup_pu: 0.92, delay: 5.0 },
                UndervoltagePoint { pickup_pu: 0.88, delay: 0.5 },
                UndervoltagePoint { pickup_pu: 0.75, delay: 0.2 },
            ],
            underfrequency_ls: vec![
                UnderfrequencyPoint { pickup_hz: hz(49.5), delays: vec![5.0, 4.0, 3.0, 2.0] },
                UnderfrequencyPoint { pickup_hz: hz(49.0), delays: vec![2.0, 1.5, 1.0, 0.5] },
                UnderfrequencyPoint { pickup_hz: hz(48.5), delays: vec![1.0, 0.75, 0.5, 0.25] },
            ],
            gen_frequency: vec![
                GenFrequencyPoint { under_hz: hz(48.5), over_hz: hz(51.5), dial: 1.0 },
                GenFrequencyPoint { under_hz: hz(47.5), over_hz: hz(52.5), dial: 0.5 },
                GenFrequencyPoint { under_hz: hz(46.0), over_hz: hz(54.0), dial: 0.25 },
            ],
            bus_groups,
            gen_time_dial,
        }
    }

    /// Every ladder must get more severe in pickup while getting faster.
    pub fn validate(&self) -> Result<(), RelayConfigError> {
        fn ladder(name: &str, pts: &[(f64, f64)], increasing: bool) -> Result<(), RelayConfigError> {
            for w in pts.windows(2) {
                let more_severe = if increasing { w[1].0 > w[0].0 } else { w[1].0 < w[0].0 };
                if !more_severe || !(w[1].1 < w[0].1) {
                    return Err(RelayConfigError(format!(
                        "{name}: pickups must get strictly more severe with strictly shorter delays"
                    )));
                }
            }
            Ok(())
        }
        let oc: Vec<_> = self.overcurrent.iter().map(|p| (p.pickup_pct, p.delay)).collect();
        ladder("overcurrent", &oc, true)?;
        let uv: Vec<_> = self.undervoltage_ls.iter().map(|p| (p.pickup_pu, p.delay)).collect();
        ladder("undervoltage", &uv, false)?;
        let cols = self.underfrequency_ls.first().map_or(0, |p| p.delays.len());
        if self.underfrequency_ls.iter().any(|p| p.delays.len() != cols || cols == 0) {
            return Err(RelayConfigError(
                "underfrequency stages need the same nonzero number of delay columns".into(),
            ));
        }
        for c in 0..cols {
            let uf: Vec<_> = self
                .underfrequency_ls
                .iter()
                .map(|p| (p.pickup_hz, p.delays[c]))
                .collect();
            ladder("underfrequency", &uf, false)?;
        }
        let gu: Vec<_> = self.gen_frequency.iter().map(|p| (p.under_hz, p.dial)).collect();
        ladder("generator underfrequency", &gu, false)?;
        let go: Vec<_> = self.gen_frequency.iter().map(|p| (p.over_hz, p.dial)).collect();
        ladder("generator overfrequency", &go, true)?;
        let all_delays = self
            .overcurrent
            .iter()
            .map(|p| p.delay)
            .chain(self.undervoltage_ls.iter().map(|p| p.delay))
            .chain(self.underfrequency_ls.iter().flat_map(|p| p.delays.iter().copied()))
            .chain(self.gen_frequency.iter().map(|p| p.dial))
            .chain(self.gen_time_dial.iter().copied());
        for d in all_delays {
            if !(d > 0.0) {
                return Err(RelayConfigError(format!("delay {d} must be > 0")));
            }
        }
        Ok(())
    }

    fn uf_column(&self, bus: BusId) -> usize {
        let cols = self.underfrequency_ls.first().map_or(1, |p| p.delays.len().max(1));
        self.bus_groups.get(&bus).copied().unwrap_or(0) % cols
    }

    fn dial(&self, gen: usize) -> f64 {
        self.gen_time_dial.get(gen).copied().unwrap_or(1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShedCause {
    Undervoltage,
    Underfrequency,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GenTripCause {
    Underfrequency,
    Overfrequency,
}

/// `point` is the zero-based row of the ladder that operated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProtectiveAction {
    TripBranch { branch: BranchId, point: usize },
    ShedLoad { bus: BusId, cause: ShedCause, point: usize },
    TripGenerator { gen: usize, cause: GenTripCause, point: usize },
}

/// Quantities seen by the relays at one instant. `None` means the element is
/// not monitored right now (open, de-energized or already disconnected).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RelayInputs {
    /// Per case branch: current as a percentage of its limit.
    pub branch_loading_pct: Vec<Option<f64>>,
    /// Per case bus: voltage magnitude where the bus still has load to shed.
    pub load_bus_voltage: Vec<Option<f64>>,
    /// Per case bus: measured frequency where the bus still has load to shed.
    pub load_bus_freq: Vec<Option<f64>>,
    /// Per generator: frequency at its terminal while it is online.
    pub gen_freq: Vec<Option<f64>>,
}

/// Pickup timers plus the latch of elements already operated.
#[derive(Clone, Debug, PartialEq)]
pub struct RelayTimers {
    oc: Vec<Vec<f64>>,
    uv: Vec<Vec<f64>>,
    uf: Vec<Vec<f64>>,
    gen_under: Vec<Vec<f64>>,
    gen_over: Vec<Vec<f64>>,
    branch_done: Vec<bool>,
    bus_done: Vec<bool>,
    gen_done: Vec<bool>,
}

impl RelayTimers {
    pub fn new(case: &NetworkCase, relays: &RelayConfig) -> Self {
        let nb = case.buses.len();
        let nbr = case.branches.len();
        let ng = case.generators.len();
        RelayTimers {
            oc: vec![vec![0.0; relays.overcurrent.len()]; nbr],
            uv: vec![vec![0.0; relays.undervoltage_ls.len()]; nb],
            uf: vec![vec![0.0; relays.underfrequency_ls.len()]; nb],
            gen_under: vec![vec![0.0; relays.gen_frequency.len()]; ng],
            gen_over: vec![vec![0.0; relays.gen_frequency.len()]; ng],
            branch_done: vec![false; nbr],
            bus_done: vec![false; nb],
            gen_done: vec![false; ng],
        }
    }
}

/// Advances `timers` by `dt` with the current inputs and returns the points
/// that operate now. An element operates at most once.
pub fn check_relays(
    case: &NetworkCase,
    inputs: &RelayInputs,
    relays: &RelayConfig,
    timers: &mut RelayTimers,
    dt: f64,
) -> Vec<ProtectiveAction> {
    let mut actions = Vec::new();

    for (bi, br) in case.branches.iter().enumerate() {
        if timers.branch_done[bi] {
            continue;
        }
        let loading = inputs.branch_loading_pct.get(bi).copied().flatten();
        let fired = run_ladder(
            &mut timers.oc[bi],
            relays.overcurrent.iter().map(|p| {
                (loading.is_some_and(|x| x > p.pickup_pct), p.delay)
            }),
            dt,
        );
        if let Some(point) = fired {
            timers.branch_done[bi] = true;
            actions.push(ProtectiveAction::TripBranch { branch: br.id, point });
        }
    }

    for (i, bus) in case.buses.iter().enumerate() {
        if timers.bus_done[i] {
            continue;
        }
        let v = inputs.load_bus_voltage.get(i).copied().flatten();
        let uv = run_ladder(
            &mut timers.uv[i],
            relays
                .undervoltage_ls
                .iter()
                .map(|p| (v.is_some_and(|x| x < p.pickup_pu), p.delay)),
            dt,
        );
        let f = inputs.load_bus_freq.get(i).copied().flatten();
        let col = relays.uf_column(bus.id);
        let uf = run_ladder(
            &mut timers.uf[i],
            relays
                .underfrequency_ls
                .iter()
                .map(|p| (f.is_some_and(|x| x < p.pickup_hz), p.delays[col])),
            dt,
        );
        let shed = match (uv, uf) {
            (Some(point), _) => Some((ShedCause::Undervoltage, point)),
            (None, Some(point)) => Some((ShedCause::Underfrequency, point)),
            (None, None) => None,
        };
        if let Some((cause, point)) = shed {
            timers.bus_done[i] = true;
            actions.push(ProtectiveAction::ShedLoad { bus: bus.id, cause, point });
        }
    }

    for g in 0..case.generators.len() {
        if timers.gen_done[g] {
            continue;
        }
        let f = inputs.gen_freq.get(g).copied().flatten();
        let y = relays.dial(g);
        let under = run_ladder(
            &mut timers.gen_under[g],
            relays
                .gen_frequency
                .iter()
                .map(|p| (f.is_some_and(|x| x < p.under_hz), p.dial * y)),
            dt,
        );
        let over = run_ladder(
            &mut timers.gen_over[g],
            relays
                .gen_frequency
                .iter()
                .map(|p| (f.is_some_and(|x| x > p.over_hz), p.dial * y)),
            dt,
        );
        let trip = match (under, over) {
            (Some(point), _) => Some((GenTripCause::Underfrequency, point)),
            (None, Some(point)) => Some((GenTripCause::Overfrequency, point)),
            (None, None) => None,
        };
        if let Some((cause, point)) = trip {
            timers.gen_done[g] = true;
            actions.push(ProtectiveAction::TripGenerator { gen: g, cause, point });
        }
    }

    actions
}

/// Updates one element's timers; returns the operating point with the
/// shortest delay among those whose timer has run out.
fn run_ladder(
    timers: &mut [f64],
    points: impl Iterator<Item = (bool, f64)>,
    dt: f64,
) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, (violated, delay)) in points.enumerate() {
        if violated {
            timers[k] += dt;
            if timers[k] >= delay - TIMER_EPS && best.is_none_or(|(_, d)| delay < d) {
                best = Some((k, delay));
            }
        } else {
            timers[k] = 0.0;
        }
    }
    best.map(|(k, _)| k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn case() -> NetworkCase {
        crate::twoarea_case()
    }

    fn hold(
        case: &NetworkCase,
        relays: &RelayConfig,
        inputs: &RelayInputs,
        seconds: f64,
        dt: f64,
    ) -> Vec<(f64, ProtectiveAction)> {
        let mut timers = RelayTimers::new(case, relays);
        let steps = (seconds / dt).round() as usize;
        let mut out = vec![];
        for k in 1..=steps {
            for a in check_relays(case, inputs, relays, &mut timers, dt) {
                out.push((k as f64 * dt, a));
            }
        }
        out
    }

    fn branch_inputs(case: &NetworkCase, idx: usize, pct: f64) -> RelayInputs {
        let mut branch_loading_pct = vec![None; case.branches.len()];
        branch_loading_pct[idx] = Some(pct);
        RelayInputs {
            branch_loading_pct,
            ..Default::default()
        }
    }

    #[test]
    fn standard_config_is_valid() {
        let c = case();
        let r = RelayConfig::standard(&c, 1);
        r.validate().unwrap();
        assert!(r.gen_time_dial.iter().all(|y| [1.0, 2.0, 3.0, 4.0].contains(y)));
    }

    #[test]
    fn line_at_130_percent_trips_on_second_point() {
        let c = case();
        let r = RelayConfig::standard(&c, 1);
        let acts = hold(&c, &r, &branch_inputs(&c, 0, 130.0), 0.2, 0.005);
        assert_eq!(acts.len(), 1);
        assert!((acts[0].0 - 0.2).abs() < 1e-9);
        assert_eq!(
            acts[0].1,
            ProtectiveAction::TripBranch { branch: c.branches[0].id, point: 1 }
        );
    }

    #[test]
    fn line_below_lowest_pickup_never_trips() {
        let c = case();
        let r = RelayConfig::standard(&c, 1);
        assert!(hold(&c, &r, &branch_inputs(&c, 0, 99.0), 60.0, 0.01).is_empty());
    }

    #[test]
    fn bus_at_090_sheds_first_stage_after_five_seconds() {
        let c = case();
        let r = RelayConfig::standard(&c, 1);
        let mut v = vec![None; c.buses.len()];
        v[3] = Some(0.90);
        let inputs = RelayInputs {
            load_bus_voltage: v,
            ..Default::default()
        };
        let acts = hold(&c, &r, &inputs, 5.0, 0.005);
        assert_eq!(acts.len(), 1);
        assert!((acts[0].0 - 5.0).abs() < 1e-9);
        assert_eq!(
            acts[0].1,
            ProtectiveAction::ShedLoad { bus: c.buses[3].id, cause: ShedCause::Undervoltage, point: 0 }
        );
    }

    #[test]
    fn tripped_elements_stay_tripped() {
        let c = case();
        let r = RelayConfig::standard(&c, 1);
        let acts = hold(&c, &r, &branch_inputs(&c, 2, 200.0), 10.0, 0.01);
        assert_eq!(acts.len(), 1);
        assert!(matches!(acts[0].1, ProtectiveAction::TripBranch { point: 3, .. }));
    }

    #[test]
    fn interrupted_violation_resets_timer() {
        let c = case();
        let r = RelayConfig::standard(&c, 1);
        let mut timers = RelayTimers::new(&c, &r);
        let hot = branch_inputs(&c, 0, 130.0);
        let cool = branch_inputs(&c, 0, 50.0);
        for k in 0..100 {
            let inp = if k % 30 == 29 { &cool } else { &hot };
            assert!(check_relays(&c, inp, &r, &mut timers, 0.005).is_empty());
        }
    }

    #[test]
    fn rejects_non_inverse_ladder() {
        let c = case();
        let mut r = RelayConfig::standard(&c, 1);
        r.overcurrent[1].delay = 6.0;
        assert!(r.validate().is_err());
    }
}
