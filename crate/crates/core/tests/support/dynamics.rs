//! Single-machine and lossless two-machine cases with the measurements
//! checked against closed-form dynamics.

use gridsync_core::dynsim::*;
use gridsync_core::netcase::{solve_power_flow, NetworkCase};
use gridsync_core::scenario::{InitialCondition, LoadProfile};
use num_complex::Complex64;

pub fn condition_for(case: &NetworkCase) -> InitialCondition {
    let steady_state = solve_power_flow(case, None).unwrap();
    assert!(steady_state.converged);
    InitialCondition {
        id: "0.0".parse().unwrap(),
        operating_point_id: 0,
        load_profile: LoadProfile::from_case(case),
        steady_state,
    }
}

pub fn no_check() -> SimOptions {
    SimOptions {
        flat_start_check: false,
        ..Default::default()
    }
}

pub const SINGLE_MACHINE: &str = "
[meta]
name single
base_mva 100
nominal_freq 60
island_zone 2
tie_lines
[bus]
1 slack 1.0 1
[gen]
1 0.5 -10 10 5.0 0.0 0.01 0 0 100 1
[load]
1 0.5 0.0 1
";

/// Frequency slope over the first 0.1 s after a 0.1 p.u. load step on the
/// H = 5 s machine, and its closed-form value, Hz/s.
pub fn swing_slope() -> (f64, f64) {
    let case: NetworkCase = SINGLE_MACHINE.parse().unwrap();
    let ic = condition_for(&case);
    let mut sim = Simulator::for_condition(&case, &ic, &RelayConfig::none(), &no_check()).unwrap();
    sim.add_load_step(1, 0.1, 0.0).unwrap();
    let window = 0.1;
    for _ in 0..(window / sim.options().dt).round() as usize {
        assert!(sim.advance());
    }
    let slope = 60.0 * (sim.machine_state().omega[0] - 1.0) / window;
    (slope, -0.1 * 60.0 / (2.0 * 5.0))
}

pub const TWO_MACHINE_LOSSLESS: &str = "
[meta]
name pair
base_mva 100
nominal_freq 50
island_zone 2
tie_lines
[bus]
1 slack 1.0 1
2 pv 1.0 1
[branch]
1 1 2 0.0 0.2 0.0 10 1
[gen]
1 0.0 -10 10 4.0 0.0 0.3 0 0 200 1
2 -0.5 -10 10 3.0 0.0 0.25 0 0 100 1
";

/// Kinetic plus potential energy on the system base for two machines tied
/// through a purely reactive path.
fn pair_energy(case: &NetworkCase, machines: &[Machine], s: &MachineState) -> f64 {
    let omega_b = 2.0 * std::f64::consts::PI * case.nominal_freq;
    let x_total: f64 = case.generators.iter().map(|g| g.xd_system(case.base_mva)).sum::<f64>()
        + case.branches[0].reactance;
    let mut w = 0.0;
    for m in machines {
        let g = m.gen;
        let pm_sys = s.pm[g] * m.base_ratio;
        w += case.generators[g].inertia_h * m.base_ratio * omega_b * (s.omega[g] - 1.0).powi(2);
        w -= pm_sys * s.delta[g];
    }
    w - machines[0].emf * machines[1].emf / x_total * (s.delta[0] - s.delta[1]).cos()
}

/// Kicks the undamped lossless pair and integrates 5 s. Returns the largest
/// energy drift relative to the kick energy and the largest angle swing, rad.
pub fn lossless_pair_drift() -> (f64, f64) {
    let case: NetworkCase = TWO_MACHINE_LOSSLESS.parse().unwrap();
    let ic = condition_for(&case);
    let (machines, eq) = init_machines(&case, &ic.steady_state).unwrap();
    let topo = Topology::initial(&case);
    let machine_y: Vec<Complex64> = machines.iter().map(|m| m.y_internal).collect();
    let net = NetworkSolver::build(&case, &topo, &[], &machine_y).unwrap();
    let online = vec![true; 2];
    let omega_b = 2.0 * std::f64::consts::PI * case.nominal_freq;

    let mut state = eq.clone();
    state.omega[1] += 0.004;
    let w_eq = pair_energy(&case, &machines, &eq);
    let w0 = pair_energy(&case, &machines, &state);
    let mut v = net
        .solve(&source_injection(2, &machines, &online, &state))
        .unwrap();
    let mut worst = 0.0f64;
    let mut swing = 0.0f64;
    for _ in 0..1000 {
        let (next, next_v) = heun_step(&machines, &online, &net, &state, &v, omega_b, 0.005).unwrap();
        state = next;
        v = next_v;
        worst = worst.max((pair_energy(&case, &machines, &state) - w0).abs());
        swing = swing.max((state.delta[1] - eq.delta[1]).abs());
    }
    (worst / (w0 - w_eq), swing)
}
