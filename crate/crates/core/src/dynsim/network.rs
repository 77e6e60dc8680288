//! Switching state of the network and the algebraic solve.
//!
//! During dynamics generators are voltage sources behind transient reactance
//! and loads are constant admittances fixed at the initial condition, so the
//! network equations are linear: `Y V = I_src`. The matrix is refactored only
//! when the topology changes.

use nalgebra::{DMatrix, DVector, Dyn, LU};
use num_complex::Complex64;

use crate::netcase::NetworkCase;

use super::trace::EventAction;

/// Which elements are currently connected.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    pub branch_closed: Vec<bool>,
    pub gen_online: Vec<bool>,
    pub load_online: Vec<bool>,
}

impl Topology {
    pub fn initial(case: &NetworkCase) -> Self {
        Topology {
            branch_closed: case.branches.iter().map(|b| b.in_service).collect(),
            gen_online: case.generators.iter().map(|g| g.in_service).collect(),
            load_online: case.loads.iter().map(|l| l.in_service).collect(),
        }
    }

    /// Returns true if anything changed.
    pub fn apply(&mut self, case: &NetworkCase, action: &EventAction) -> bool {
        let set = |flag: &mut bool, v: bool| std::mem::replace(flag, v) != v;
        match *action {
            EventAction::TieOpen { branch } | EventAction::LineTrip { branch, .. } => case
                .branches
                .iter()
                .position(|b| b.id == branch)
                .is_some_and(|i| set(&mut self.branch_closed[i], false)),
            EventAction::TieClose { branch } => case
                .branches
                .iter()
                .position(|b| b.id == branch)
                .is_some_and(|i| set(&mut self.branch_closed[i], true)),
            EventAction::LoadShed { bus, .. } => {
                let mut changed = false;
                for (i, l) in case.loads.iter().enumerate() {
                    if l.bus == bus {
                        changed |= set(&mut self.load_online[i], false);
                    }
                }
                changed
            }
            EventAction::GenTrip { gen, .. } => {
                gen < self.gen_online.len() && set(&mut self.gen_online[gen], false)
            }
        }
    }

    /// Connected-component label per bus (case order); the label is the
    /// smallest bus index in the component.
    pub fn components(&self, case: &NetworkCase) -> Vec<usize> {
        let index = case.bus_index();
        let mut parent: Vec<usize> = (0..case.buses.len()).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for (br, closed) in case.branches.iter().zip(&self.branch_closed) {
            if !closed {
                continue;
            }
            let a = find(&mut parent, index[&br.from_bus]);
            let b = find(&mut parent, index[&br.to_bus]);
            if a != b {
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                parent[hi] = lo;
            }
        }
        (0..case.buses.len()).map(|i| find(&mut parent, i)).collect()
    }

    /// A bus is energized when its component contains an online generator.
    pub fn energized(&self, case: &NetworkCase, comp: &[usize]) -> Vec<bool> {
        let index = case.bus_index();
        let mut live = vec![false; case.buses.len()];
        for (g, on) in case.generators.iter().zip(&self.gen_online) {
            if *on {
                live[comp[index[&g.bus]]] = true;
            }
        }
        comp.iter().map(|c| live[*c]).collect()
    }

    /// In service: energized, synchronized with the main grid (the slack
    /// bus's component), and not stripped of every attached load and machine.
    pub fn bus_in_service(&self, case: &NetworkCase) -> Vec<bool> {
        let comp = self.components(case);
        let energized = self.energized(case, &comp);
        let index = case.bus_index();
        let main = comp[index[&case.slack_bus()]];
        let mut attached = vec![0usize; case.buses.len()];
        let mut alive = vec![0usize; case.buses.len()];
        for (l, on) in case.loads.iter().zip(&self.load_online) {
            let i = index[&l.bus];
            if l.in_service {
                attached[i] += 1;
                alive[i] += usize::from(*on);
            }
        }
        for (g, on) in case.generators.iter().zip(&self.gen_online) {
            let i = index[&g.bus];
            if g.in_service {
                attached[i] += 1;
                alive[i] += usize::from(*on);
            }
        }
        (0..case.buses.len())
            .map(|i| energized[i] && comp[i] == main && (attached[i] == 0 || alive[i] > 0))
            .collect()
    }
}

/// Factorized network for the current topology.
#[derive(Clone)]
pub struct NetworkSolver {
    lu: LU<Complex64, Dyn, Dyn>,
    n: usize,
    pub energized: Vec<bool>,
    pub components: Vec<usize>,
}

impl NetworkSolver {
    /// `load_y[i]` is the admittance of case load `i` and `machine_y[g]`
    /// that of generator `g`'s internal reactance. Returns `None` if the
    /// matrix is singular.
    pub fn build(
        case: &NetworkCase,
        topo: &Topology,
        load_y: &[Complex64],
        machine_y: &[Complex64],
    ) -> Option<Self> {
        let index = case.bus_index();
        let n = case.buses.len();
        let mut y = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
        for (br, closed) in case.branches.iter().zip(&topo.branch_closed) {
            if !closed {
                continue;
            }
            let f = index[&br.from_bus];
            let t = index[&br.to_bus];
            let ys = br.series_admittance();
            let ysh = Complex64::new(0.0, br.shunt_susceptance / 2.0);
            y[(f, f)] += ys + ysh;
            y[(t, t)] += ys + ysh;
            y[(f, t)] -= ys;
            y[(t, f)] -= ys;
        }
        for ((l, on), yl) in case.loads.iter().zip(&topo.load_online).zip(load_y) {
            if *on {
                let i = index[&l.bus];
                y[(i, i)] += *yl;
            }
        }
        for ((g, on), ym) in case.generators.iter().zip(&topo.gen_online).zip(machine_y) {
            if *on {
                let i = index[&g.bus];
                y[(i, i)] += *ym;
            }
        }
        let components = topo.components(case);
        let energized = topo.energized(case, &components);
        for i in 0..n {
            if !energized[i] {
                for k in 0..n {
                    y[(i, k)] = Complex64::new(0.0, 0.0);
                    y[(k, i)] = Complex64::new(0.0, 0.0);
                }
                y[(i, i)] = Complex64::new(1.0, 0.0);
            }
        }
        let lu = y.lu();
        if !lu.is_invertible() {
            return None;
        }
        Some(NetworkSolver {
            lu,
            n,
            energized,
            components,
        })
    }

    /// Solves for bus voltages given per-bus source current injections.
    pub fn solve(&self, injection: &[Complex64]) -> Option<Vec<Complex64>> {
        let mut rhs = DVector::from_column_slice(injection);
        for (i, e) in self.energized.iter().enumerate() {
            if !e {
                rhs[i] = Complex64::new(0.0, 0.0);
            }
        }
        if !self.lu.solve_mut(&mut rhs) {
            return None;
        }
        let v: Vec<Complex64> = rhs.iter().copied().collect();
        debug_assert_eq!(v.len(), self.n);
        v.iter().all(|x| x.re.is_finite() && x.im.is_finite()).then_some(v)
    }
}
