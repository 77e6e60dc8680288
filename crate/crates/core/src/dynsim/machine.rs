//! Classical machine model with a first-order droop governor.
//!
//! Per machine, on its own base:
//!
//! ```text
//! d(delta)/dt = omega_b (omega - 1)
//! 2H d(omega)/dt = Pm - Pe - D (omega - 1)
//! Tg d(Pm)/dt = P_ref - (omega - 1) / R - Pm      (only when R > 0)
//! ```
//!
//! `Pe` is computed from the internal EMF `E' = |E'| e^(j delta)` behind the
//! transient reactance and the terminal voltage.

use num_complex::Complex64;

use crate::netcase::{NetworkCase, SteadyState};

use super::network::NetworkSolver;
use super::SimError;

#[derive(Clone, Debug, PartialEq)]
pub struct Machine {
    /// Index of the generator in the case.
    pub gen: usize,
    /// Index of its terminal bus in the case's bus list.
    pub bus: usize,
    /// Internal admittance `1 / (j X'd)` on the system base.
    pub y_internal: Complex64,
    pub emf: f64,
    pub two_h: f64,
    pub damping: f64,
    pub droop: f64,
    pub governor_time: f64,
    /// Machine base divided by system base.
    pub base_ratio: f64,
    /// Governor setpoint, machine base.
    pub p_ref: f64,
}

impl Machine {
    pub fn governor_enabled(&self) -> bool {
        self.droop > 0.0 && self.governor_time > 0.0
    }

    pub fn internal_emf(&self, delta: f64) -> Complex64 {
        Complex64::from_polar(self.emf, delta)
    }

    /// Electrical output in system-base p.u.
    pub fn electrical_power(&self, delta: f64, terminal: Complex64) -> f64 {
        let e = self.internal_emf(delta);
        (e * ((e - terminal) * self.y_internal).conj()).re
    }
}

/// Machine state vectors, indexed like the case's generators.
#[derive(Clone, Debug, PartialEq)]
pub struct MachineState {
    pub delta: Vec<f64>,
    pub omega: Vec<f64>,
    pub pm: Vec<f64>,
}

impl MachineState {
    fn axpy(&self, h: f64, d: &MachineState) -> MachineState {
        let f = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a + h * b).collect();
        MachineState {
            delta: f(&self.delta, &d.delta),
            omega: f(&self.omega, &d.omega),
            pm: f(&self.pm, &d.pm),
        }
    }
}

/// Builds the machine models and their equilibrium state from a solved
/// steady state. Out-of-service generators get a placeholder entry so that
/// indices stay aligned with the case.
pub fn init_machines(
    case: &NetworkCase,
    steady: &SteadyState,
) -> Result<(Vec<Machine>, MachineState), SimError> {
    let index = case.bus_index();
    let voltages = steady.complex_voltages();
    let n = case.generators.len();
    let mut machines = Vec::with_capacity(n);
    let mut state = MachineState {
        delta: vec![0.0; n],
        omega: vec![1.0; n],
        pm: vec![0.0; n],
    };
    for (g, gen) in case.generators.iter().enumerate() {
        let bus = index[&gen.bus];
        let x = gen.xd_system(case.base_mva);
        let base_ratio = gen.machine_base / case.base_mva;
        let (emf, delta, p_ref) = match steady.gen_dispatch.get(g).copied().flatten() {
            Some((p, q)) if gen.in_service => {
                let v = voltages[bus];
                let s = Complex64::new(p, q);
                let current = (s / v).conj();
                let e = v + Complex64::new(0.0, x) * current;
                (e.norm(), e.arg(), p / base_ratio)
            }
            _ if gen.in_service => {
                return Err(SimError::InitialCondition(format!(
                    "generator {g} at bus {} has no steady-state dispatch",
                    gen.bus
                )))
            }
            _ => (0.0, 0.0, 0.0),
        };
        state.delta[g] = delta;
        state.pm[g] = p_ref;
        machines.push(Machine {
            gen: g,
            bus,
            y_internal: Complex64::new(0.0, -1.0 / x),
            emf,
            two_h: 2.0 * gen.inertia_h,
            damping: gen.damping_d,
            droop: gen.governor_droop,
            governor_time: gen.governor_time_const,
            base_ratio,
            p_ref,
        });
    }
    Ok((machines, state))
}

/// Norton current injections of the online machines, per bus.
pub fn source_injection(
    n_buses: usize,
    machines: &[Machine],
    online: &[bool],
    state: &MachineState,
) -> Vec<Complex64> {
    let mut inj = vec![Complex64::new(0.0, 0.0); n_buses];
    for (m, on) in machines.iter().zip(online) {
        if *on {
            inj[m.bus] += m.internal_emf(state.delta[m.gen]) * m.y_internal;
        }
    }
    inj
}

/// State derivative at `state` with terminal voltages `v`. Offline machines
/// are frozen.
pub fn derivatives(
    machines: &[Machine],
    online: &[bool],
    state: &MachineState,
    v: &[Complex64],
    omega_b: f64,
) -> MachineState {
    let n = machines.len();
    let mut d = MachineState {
        delta: vec![0.0; n],
        omega: vec![0.0; n],
        pm: vec![0.0; n],
    };
    for (m, on) in machines.iter().zip(online) {
        if !*on {
            continue;
        }
        let g = m.gen;
        let slip = state.omega[g] - 1.0;
        let pe = m.electrical_power(state.delta[g], v[m.bus]) / m.base_ratio;
        d.delta[g] = omega_b * slip;
        d.omega[g] = (state.pm[g] - pe - m.damping * slip) / m.two_h;
        if m.governor_enabled() {
            d.pm[g] = (m.p_ref - slip / m.droop - state.pm[g]) / m.governor_time;
        }
    }
    d
}

/// One predictor-corrector (Heun) step. `v` must be the network solution at
/// `state`; returns the new state and the network solution there. `None`
/// means the network solve failed.
pub fn heun_step(
    machines: &[Machine],
    online: &[bool],
    network: &NetworkSolver,
    state: &MachineState,
    v: &[Complex64],
    omega_b: f64,
    dt: f64,
) -> Option<(MachineState, Vec<Complex64>)> {
    let n_buses = v.len();
    let k1 = derivatives(machines, online, state, v, omega_b);
    let predicted = state.axpy(dt, &k1);
    let v_p = network.solve(&source_injection(n_buses, machines, online, &predicted))?;
    let k2 = derivatives(machines, online, &predicted, &v_p, omega_b);
    let mut next = state.axpy(0.5 * dt, &k1);
    next = next.axpy(0.5 * dt, &k2);
    let v_next = network.solve(&source_injection(n_buses, machines, online, &next))?;
    let finite = next
        .delta
        .iter()
        .chain(&next.omega)
        .chain(&next.pm)
        .all(|x| x.is_finite());
    finite.then_some((next, v_next))
}
