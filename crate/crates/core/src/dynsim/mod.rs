//! Time-domain simulation of islanding and asynchronous reconnection.
//!
//! [`Simulator`] advances the network one fixed step at a time so that batch
//! runs ([`run_simulation`]) and interactive sessions share exactly the same
//! stepping. Each [`Simulator::advance`] call:
//!
//! 1. evaluates the relays on the current network solution, applies any
//!    operations and re-solves the network;
//! 2. records a trace sample every `sample_period`;
//! 3. updates the bus frequency meters;
//! 4. integrates the machines over `dt` with Heun's method.
//!
//! Switching requested by the caller (opening or closing the ties) applies
//! before the next `advance`.

mod label;
mod machine;
mod network;
mod relay;
mod trace;

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::netcase::{NetworkCase, SteadyState};
use crate::scenario::InitialCondition;

pub use label::{label_outcome, LabelResult, LabelThresholds, StabilityLabel, UnstableReason};
pub use machine::{derivatives, heun_step, init_machines, source_injection, Machine, MachineState};
pub use network::{NetworkSolver, Topology};
pub use relay::{
    check_relays, GenFrequencyPoint, GenTripCause, OvercurrentPoint, ProtectiveAction, RelayConfig,
    RelayConfigError, RelayInputs, RelayTimers, ShedCause, UnderfrequencyPoint, UndervoltagePoint,
};
pub use trace::{read_events, write_events, EventAction, SimEvent, Trace, TraceSample, TRACE_VERSION};

/// Speed deviation (p.u.) tolerated during the flat-start check.
pub const FLAT_START_TOL: f64 = 1e-6;
/// Length of the flat-start check, seconds.
pub const FLAT_START_SECONDS: f64 = 1.0;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("invalid options: {0}")]
    Options(String),
    #[error("invalid initial condition: {0}")]
    InitialCondition(String),
    #[error("steady state is not an equilibrium: speed deviation {deviation:.3e} p.u. after {seconds} s")]
    FlatStart { deviation: f64, seconds: f64 },
    #[error("protection operated during the flat-start check: {0}")]
    FlatStartProtection(String),
    #[error("network solve failed at t = {0} s")]
    Diverged(f64),
    #[error(transparent)]
    Relay(#[from] RelayConfigError),
    #[error("format error: {0}")]
    Format(String),
}

/// Islanding and reconnection times, seconds. Both events are optional, but
/// reconnection requires islanding first.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSchedule {
    pub island_time: Option<f64>,
    pub reconnect_time: Option<f64>,
    pub end_time: f64,
}

impl EventSchedule {
    pub fn new(island_time: f64, reconnect_time: f64, end_time: f64) -> Self {
        EventSchedule {
            island_time: Some(island_time),
            reconnect_time: Some(reconnect_time),
            end_time,
        }
    }

    /// Island at 5 s, reconnect at 45 s, stop at 120 s.
    pub fn standard() -> Self {
        EventSchedule::new(5.0, 45.0, 120.0)
    }

    pub fn no_events(end_time: f64) -> Self {
        EventSchedule {
            island_time: None,
            reconnect_time: None,
            end_time,
        }
    }

    pub fn islanding_only(island_time: f64, end_time: f64) -> Self {
        EventSchedule {
            island_time: Some(island_time),
            reconnect_time: None,
            end_time,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Schedule(m.into()));
        if !(self.end_time.is_finite() && self.end_time > 0.0) {
            return bad("end time must be positive");
        }
        if let Some(ti) = self.island_time {
            if !(ti >= 0.0 && ti < self.end_time) {
                return bad("islanding must happen within the run");
            }
        }
        match (self.island_time, self.reconnect_time) {
            (None, Some(_)) => bad("reconnection requires islanding"),
            (Some(ti), Some(tr)) if !(tr > ti && tr < self.end_time) => {
                bad("reconnection must follow islanding and precede the end")
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub dt: f64,
    pub sample_period: f64,
    /// Time constant of the bus frequency meters, seconds.
    pub freq_filter_time: f64,
    pub thresholds: LabelThresholds,
    pub flat_start_check: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            dt: 0.005,
            sample_period: 0.02,
            freq_filter_time: 0.1,
            thresholds: LabelThresholds::default(),
            flat_start_check: true,
        }
    }
}

impl SimOptions {
    pub fn sample_every(&self) -> Result<u64, SimError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SimError::Options("dt must be positive".into()));
        }
        let ratio = self.sample_period / self.dt;
        let k = ratio.round();
        if k < 1.0 || (ratio - k).abs() > 1e-6 {
            return Err(SimError::Options(
                "sample period must be a whole multiple of dt".into(),
            ));
        }
        if !(self.freq_filter_time > 0.0) {
            return Err(SimError::Options("frequency filter time must be positive".into()));
        }
        Ok(k as u64)
    }

    /// Step index of time `t` on this step grid.
    pub fn step_of(&self, t: f64) -> u64 {
        (t / self.dt).round() as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimOutcome {
    pub trace: Trace,
    pub events: Vec<SimEvent>,
    pub label: LabelResult,
    pub schedule: EventSchedule,
}

/// Steppable simulation of one initial condition.
#[derive(Clone)]
pub struct Simulator {
    case: NetworkCase,
    relays: RelayConfig,
    opts: SimOptions,
    sample_every: u64,
    omega_b: f64,
    machines: Vec<Machine>,
    state: MachineState,
    topo: Topology,
    load_y: Vec<Complex64>,
    machine_y: Vec<Complex64>,
    network: Option<NetworkSolver>,
    v: Vec<Complex64>,
    bus_angle: Vec<f64>,
    filter: Vec<f64>,
    freq: Vec<f64>,
    timers: RelayTimers,
    step: u64,
    events: Vec<SimEvent>,
    trace: Trace,
    needs_solve: bool,
}

impl Simulator {
    /// `case` must already carry the loads the steady state was solved with.
    pub fn new(
        case: &NetworkCase,
        steady: &SteadyState,
        relays: &RelayConfig,
        opts: &SimOptions,
    ) -> Result<Self, SimError> {
        relays.validate()?;
        let sample_every = opts.sample_every()?;
        if !steady.converged {
            return Err(SimError::InitialCondition("steady state did not converge".into()));
        }
        let ids: Vec<u32> = case.buses.iter().map(|b| b.id).collect();
        if steady.buses != ids {
            return Err(SimError::InitialCondition(
                "steady state does not cover the case buses in order".into(),
            ));
        }
        let (machines, state) = init_machines(case, steady)?;
        let index = case.bus_index();
        let v0 = steady.complex_voltages();
        let load_y = case
            .loads
            .iter()
            .map(|l| {
                let vm = v0[index[&l.bus]].norm();
                Complex64::new(l.p, -l.q) / (vm * vm)
            })
            .collect();
        let machine_y = machines.iter().map(|m| m.y_internal).collect();
        let bus_angle: Vec<f64> = v0.iter().map(|v| v.arg()).collect();
        let nb = case.buses.len();
        let trace = Trace {
            buses: ids,
            machines: (0..case.generators.len()).collect(),
            sample_period: opts.sample_period,
            nominal_freq: case.nominal_freq,
            samples: Vec::new(),
            diverged_at: None,
        };
        Ok(Simulator {
            case: case.clone(),
            relays: relays.clone(),
            opts: opts.clone(),
            sample_every,
            omega_b: 2.0 * PI * case.nominal_freq,
            machines,
            state,
            topo: Topology::initial(case),
            load_y,
            machine_y,
            network: None,
            v: v0,
            filter: bus_angle.clone(),
            bus_angle,
            freq: vec![case.nominal_freq; nb],
            timers: RelayTimers::new(case, relays),
            step: 0,
            events: Vec::new(),
            trace,
            needs_solve: true,
        })
    }

    /// Simulator for an initial condition of `base` (loads are taken from the
    /// condition's profile).
    pub fn for_condition(
        base: &NetworkCase,
        ic: &InitialCondition,
        relays: &RelayConfig,
        opts: &SimOptions,
    ) -> Result<Self, SimError> {
        Simulator::new(&ic.load_profile.apply(base), &ic.steady_state, relays, opts)
    }

    pub fn case(&self) -> &NetworkCase {
        &self.case
    }

    pub fn options(&self) -> &SimOptions {
        &self.opts
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.opts.dt
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn events(&self) -> &[SimEvent] {
        &self.events
    }

    pub fn last_sample(&self) -> Option<&TraceSample> {
        self.trace.samples.last()
    }

    pub fn diverged(&self) -> bool {
        self.trace.diverged_at.is_some()
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn machine_state(&self) -> &MachineState {
        &self.state
    }

    pub fn bus_voltages(&self) -> &[Complex64] {
        &self.v
    }

    /// True while at least one tie line is closed.
    pub fn ties_closed(&self) -> bool {
        self.case.tie_lines.iter().any(|id| {
            self.case
                .branches
                .iter()
                .position(|b| b.id == *id)
                .is_some_and(|i| self.topo.branch_closed[i])
        })
    }

    fn switch(&mut self, action: EventAction) {
        if self.topo.apply(&self.case, &action) {
            self.events.push(SimEvent {
                time: self.time(),
                action,
            });
            self.needs_solve = true;
        }
    }

    pub fn open_ties(&mut self) {
        for branch in self.case.tie_lines.clone() {
            self.switch(EventAction::TieOpen { branch });
        }
    }

    pub fn close_ties(&mut self) {
        for branch in self.case.tie_lines.clone() {
            self.switch(EventAction::TieClose { branch });
        }
    }

    /// Adds a constant-power-factor load step at `bus`, modeled as a shunt
    /// admittance at the current voltage. Not logged as an event.
    pub fn add_load_step(&mut self, bus: u32, p: f64, q: f64) -> Result<(), SimError> {
        let i = *self
            .case
            .bus_index()
            .get(&bus)
            .ok_or_else(|| SimError::InitialCondition(format!("unknown bus {bus}")))?;
        let vm = self.v[i].norm().max(1e-6);
        self.case.loads.push(crate::netcase::Load {
            bus,
            p,
            q,
            in_service: true,
        });
        self.topo.load_online.push(true);
        self.load_y.push(Complex64::new(p, -q) / (vm * vm));
        self.timers = RelayTimers::new(&self.case, &self.relays);
        self.needs_solve = true;
        Ok(())
    }

    fn solve(&mut self) -> bool {
        if self.needs_solve {
            self.network = NetworkSolver::build(&self.case, &self.topo, &self.load_y, &self.machine_y);
            self.needs_solve = false;
        }
        let Some(net) = &self.network else { return false };
        let inj = source_injection(self.case.buses.len(), &self.machines, &self.topo.gen_online, &self.state);
        match net.solve(&inj) {
            Some(v) => {
                self.v = v;
                self.update_angles();
                true
            }
            None => false,
        }
    }

    fn energized(&self) -> &[bool] {
        self.network.as_ref().map_or(&[], |n| &n.energized)
    }

    fn update_angles(&mut self) {
        let live = self.network.as_ref().map(|n| n.energized.clone()).unwrap_or_default();
        for (i, v) in self.v.iter().enumerate() {
            if live.get(i).copied().unwrap_or(false) && v.norm() > 1e-9 {
                let prev = self.bus_angle[i];
                let d = (v.arg() - prev + PI).rem_euclid(2.0 * PI) - PI;
                self.bus_angle[i] = prev + d;
            }
        }
        let t = self.opts.freq_filter_time;
        for i in 0..self.v.len() {
            self.freq[i] = if live.get(i).copied().unwrap_or(false) {
                self.case.nominal_freq + (self.bus_angle[i] - self.filter[i]) / (2.0 * PI * t)
            } else {
                self.case.nominal_freq
            };
        }
    }

    fn relay_inputs(&self) -> RelayInputs {
        let index = self.case.bus_index();
        let live = self.energized();
        let mut branch_loading_pct = vec![None; self.case.branches.len()];
        for (k, br) in self.case.branches.iter().enumerate() {
            let (f, t) = (index[&br.from_bus], index[&br.to_bus]);
            if !self.topo.branch_closed[k] || !live[f] || br.current_limit <= 0.0 {
                continue;
            }
            let ys = br.series_admittance();
            let ysh = Complex64::new(0.0, br.shunt_susceptance / 2.0);
            let i_f = (self.v[f] - self.v[t]) * ys + self.v[f] * ysh;
            let i_t = (self.v[t] - self.v[f]) * ys + self.v[t] * ysh;
            branch_loading_pct[k] = Some(100.0 * i_f.norm().max(i_t.norm()) / br.current_limit);
        }
        let nb = self.case.buses.len();
        let mut has_load = vec![false; nb];
        for (l, on) in self.case.loads.iter().zip(&self.topo.load_online) {
            if *on {
                has_load[index[&l.bus]] = true;
            }
        }
        let mut load_bus_voltage = vec![None; nb];
        let mut load_bus_freq = vec![None; nb];
        for i in 0..nb {
            if has_load[i] && live[i] {
                load_bus_voltage[i] = Some(self.v[i].norm());
                load_bus_freq[i] = Some(self.freq[i]);
            }
        }
        let gen_freq = self
            .case
            .generators
            .iter()
            .zip(&self.topo.gen_online)
            .map(|(g, on)| on.then(|| self.freq[index[&g.bus]]))
            .collect();
        RelayInputs {
            branch_loading_pct,
            load_bus_voltage,
            load_bus_freq,
            gen_freq,
        }
    }

    fn apply_protection(&mut self) -> bool {
        let inputs = self.relay_inputs();
        let actions = check_relays(&self.case, &inputs, &self.relays, &mut self.timers, self.opts.dt);
        if actions.is_empty() {
            return false;
        }
        for a in actions {
            let action = match a {
                ProtectiveAction::TripBranch { branch, point } => EventAction::LineTrip { branch, point },
                ProtectiveAction::ShedLoad { bus, cause, point } => EventAction::LoadShed { bus, cause, point },
                ProtectiveAction::TripGenerator { gen, cause, point } => {
                    EventAction::GenTrip { gen, cause, point }
                }
            };
            self.switch(action);
        }
        true
    }

    fn sample(&self) -> TraceSample {
        TraceSample {
            time: self.time(),
            vm: self.v.iter().map(|v| v.norm()).collect(),
            va_deg: self.bus_angle.iter().map(|a| a.to_degrees()).collect(),
            freq_hz: self.freq.clone(),
            rotor_angle_deg: self.state.delta.iter().map(|a| a.to_degrees()).collect(),
            speed_pu: self.state.omega.clone(),
        }
    }

    fn mark_diverged(&mut self) {
        if self.trace.diverged_at.is_none() {
            self.trace.diverged_at = Some(self.time());
        }
    }

    /// Advances one step. Returns `false` once the network solve has failed;
    /// the run cannot continue after that.
    pub fn advance(&mut self) -> bool {
        if self.diverged() {
            return false;
        }
        if self.needs_solve && !self.solve() {
            self.mark_diverged();
            return false;
        }
        if self.apply_protection() && !self.solve() {
            self.mark_diverged();
            return false;
        }
        if self.step % self.sample_every == 0 {
            let s = self.sample();
            self.trace.samples.push(s);
        }
        let a = self.opts.dt / self.opts.freq_filter_time;
        for (x, th) in self.filter.iter_mut().zip(&self.bus_angle) {
            *x += a * (th - *x);
        }
        let Some(net) = &self.network else {
            self.mark_diverged();
            return false;
        };
        match heun_step(
            &self.machines,
            &self.topo.gen_online,
            net,
            &self.state,
            &self.v,
            self.omega_b,
            self.opts.dt,
        ) {
            Some((state, v)) => {
                self.state = state;
                self.v = v;
                self.step += 1;
                self.update_angles();
                true
            }
            None => {
                self.step += 1;
                self.mark_diverged();
                false
            }
        }
    }

    /// Records the closing sample (if it falls on the sample grid) and labels
    /// the run.
    pub fn finish(mut self, schedule: EventSchedule) -> SimOutcome {
        if !self.diverged() && self.step % self.sample_every == 0 {
            let needs = self.trace.samples.last().is_none_or(|s| s.time < self.time() - 1e-9);
            if needs && (!self.needs_solve || self.solve()) {
                let s = self.sample();
                self.trace.samples.push(s);
            }
        }
        let label = label_outcome(&self.case, &self.trace, &self.events, &self.opts.thresholds);
        SimOutcome {
            trace: self.trace,
            events: self.events,
            label,
            schedule,
        }
    }

    /// Runs a copy of this simulator without switching and checks that it
    /// stays at equilibrium.
    pub fn check_flat_start(&self, seconds: f64) -> Result<(), SimError> {
        let mut probe = self.clone();
        let steps = (seconds / self.opts.dt).round() as u64;
        for _ in 0..steps {
            if !probe.advance() {
                return Err(SimError::Diverged(probe.time()));
            }
        }
        if let Some(e) = probe.events.first() {
            return Err(SimError::FlatStartProtection(e.to_string()));
        }
        let deviation = probe
            .state
            .omega
            .iter()
            .zip(&probe.topo.gen_online)
            .filter(|(_, on)| **on)
            .map(|(w, _)| (w - 1.0).abs())
            .fold(0.0, f64::max);
        if deviation > FLAT_START_TOL {
            return Err(SimError::FlatStart { deviation, seconds });
        }
        Ok(())
    }
}

/// Drives a simulator through `schedule`: islanding and reconnection apply
/// at the first step at or after their times.
pub fn drive(mut sim: Simulator, schedule: &EventSchedule) -> Result<SimOutcome, SimError> {
    schedule.validate()?;
    let opts = sim.options().clone();
    let island = schedule.island_time.map(|t| opts.step_of(t));
    let reconnect = schedule.reconnect_time.map(|t| opts.step_of(t));
    let end = opts.step_of(schedule.end_time);
    while sim.step_index() < end {
        let k = Some(sim.step_index());
        if k == island {
            sim.open_ties();
        }
        if k == reconnect {
            sim.close_ties();
        }
        if !sim.advance() {
            break;
        }
    }
    Ok(sim.finish(*schedule))
}

/// Simulates one initial condition of `base` under `schedule`.
pub fn run_simulation(
    base: &NetworkCase,
    ic: &InitialCondition,
    schedule: &EventSchedule,
    relays: &RelayConfig,
    opts: &SimOptions,
) -> Result<SimOutcome, SimError> {
    schedule.validate()?;
    let sim = Simulator::for_condition(base, ic, relays, opts)?;
    if opts.flat_start_check {
        let window = schedule
            .island_time
            .unwrap_or(schedule.end_time)
            .min(FLAT_START_SECONDS);
        sim.check_flat_start(window)?;
    }
    drive(sim, schedule)
}
