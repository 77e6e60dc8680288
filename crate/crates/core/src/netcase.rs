//! Network case data model, the `.case` text format, and a polar
//! Newton-Raphson power flow.
//!
//! A case file is split into sections (`[meta]`, `[bus]`, `[branch]`,
//! `[gen]`, `[load]`). Blank lines and anything after `#` are ignored.
//! Every record is one line of whitespace-separated fields:
//!
//! ```text
//! [meta]    key value...        name, base_mva, nominal_freq, island_zone, tie_lines
//! [bus]     id type vset zone   type is slack | pv | pq
//! [branch]  id from to r x b limit status
//! [gen]     bus p_set q_min q_max h d xd' droop t_gov mbase status
//! [load]    bus p q status
//! ```
//!
//! All electrical quantities are per unit on `base_mva`, except the generator
//! dynamic parameters (`h`, `d`, `xd'`, `droop`) which are on the machine base.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

pub type BusId = u32;
pub type BranchId = u32;
pub type ZoneId = u32;

/// Maximum absolute power mismatch (p.u.) accepted as converged.
pub const PF_TOLERANCE: f64 = 1e-8;
/// Newton iteration cap per pass.
pub const PF_MAX_ITER: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum CaseError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error at line {line}, field `{field}`: {message}")]
    Parse {
        line: usize,
        field: String,
        message: String,
    },
    #[error("invariant violated: {0}")]
    Invariant(String),
}

#[derive(Debug, thiserror::Error)]
pub enum PowerFlowError {
    #[error("singular Jacobian at iteration {iteration}")]
    SingularJacobian { iteration: usize },
    #[error("zone {0} has no in-service generator to act as slack")]
    NoIslandSlack(ZoneId),
    #[error("state is not converged")]
    NotConverged,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BusType {
    Slack,
    Pv,
    Pq,
}

impl BusType {
    fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "slack" | "ref" => Some(BusType::Slack),
            "pv" => Some(BusType::Pv),
            "pq" => Some(BusType::Pq),
            _ => None,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            BusType::Slack => "slack",
            BusType::Pv => "pv",
            BusType::Pq => "pq",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: BusId,
    pub voltage_setpoint: f64,
    pub kind: BusType,
    pub zone: ZoneId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub id: BranchId,
    pub from_bus: BusId,
    pub to_bus: BusId,
    pub resistance: f64,
    pub reactance: f64,
    pub shunt_susceptance: f64,
    pub current_limit: f64,
    pub in_service: bool,
}

impl Branch {
    pub fn series_admittance(&self) -> Complex64 {
        Complex64::new(1.0, 0.0) / Complex64::new(self.resistance, self.reactance)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub bus: BusId,
    pub p_set: f64,
    pub q_min: f64,
    pub q_max: f64,
    /// Inertia constant, seconds on machine base.
    pub inertia_h: f64,
    /// Damping, p.u. torque per p.u. speed on machine base.
    pub damping_d: f64,
    /// Transient reactance, p.u. on machine base.
    pub transient_reactance: f64,
    /// Droop, p.u. speed per p.u. power on machine base. Zero disables the governor.
    pub governor_droop: f64,
    pub governor_time_const: f64,
    pub machine_base: f64,
    pub in_service: bool,
}

impl Generator {
    /// Transient reactance converted to the system base.
    pub fn xd_system(&self, base_mva: f64) -> f64 {
        self.transient_reactance * base_mva / self.machine_base
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Load {
    pub bus: BusId,
    pub p: f64,
    pub q: f64,
    pub in_service: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkCase {
    pub name: String,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub generators: Vec<Generator>,
    pub loads: Vec<Load>,
    pub tie_lines: Vec<BranchId>,
    pub island_zone: ZoneId,
    pub base_mva: f64,
    pub nominal_freq: f64,
}

impl NetworkCase {
    pub fn zones(&self) -> BTreeMap<BusId, ZoneId> {
        self.buses.iter().map(|b| (b.id, b.zone)).collect()
    }

    pub fn bus_index(&self) -> BTreeMap<BusId, usize> {
        self.buses
            .iter()
            .enumerate()
            .map(|(i, b)| (b.id, i))
            .collect()
    }

    pub fn bus(&self, id: BusId) -> Option<&Bus> {
        self.buses.iter().find(|b| b.id == id)
    }

    pub fn branch(&self, id: BranchId) -> Option<&Branch> {
        self.branches.iter().find(|b| b.id == id)
    }

    pub fn slack_bus(&self) -> BusId {
        self.buses
            .iter()
            .find(|b| b.kind == BusType::Slack)
            .map(|b| b.id)
            .expect("validated case has a slack bus")
    }

    /// Buses on either end of a tie line.
    pub fn pcc_buses(&self) -> BTreeSet<BusId> {
        self.tie_lines
            .iter()
            .filter_map(|id| self.branch(*id))
            .flat_map(|br| [br.from_bus, br.to_bus])
            .collect()
    }

    /// Stable content fingerprint (hex SHA-256 of the serialized case).
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.to_case_string().as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn validate(&self) -> Result<(), CaseError> {
        let inv = |m: String| Err(CaseError::Invariant(m));
        if !(self.base_mva > 0.0) {
            return inv("base_mva must be > 0".into());
        }
        if !(self.nominal_freq > 0.0) {
            return inv("nominal_freq must be > 0".into());
        }
        if self.buses.is_empty() {
            return inv("case declares no buses".into());
        }
        let mut ids = BTreeSet::new();
        for b in &self.buses {
            if !ids.insert(b.id) {
                return inv(format!("duplicate bus id {}", b.id));
            }
            if !(b.voltage_setpoint > 0.0 && b.voltage_setpoint < 2.0) {
                return inv(format!("bus {} voltage_setpoint must lie in (0, 2)", b.id));
            }
        }
        let slacks: Vec<_> = self
            .buses
            .iter()
            .filter(|b| b.kind == BusType::Slack)
            .collect();
        if slacks.len() != 1 {
            return inv(format!(
                "exactly one slack bus required, found {}",
                slacks.len()
            ));
        }
        let mut branch_ids = BTreeSet::new();
        for br in &self.branches {
            if !branch_ids.insert(br.id) {
                return inv(format!("duplicate branch id {}", br.id));
            }
            for end in [br.from_bus, br.to_bus] {
                if !ids.contains(&end) {
                    return inv(format!(
                        "branch {} references unknown bus {}",
                        br.id, end
                    ));
                }
            }
            if br.reactance == 0.0 || !br.reactance.is_finite() {
                return inv(format!("branch {} reactance must be nonzero", br.id));
            }
            if !(br.current_limit > 0.0) {
                return inv(format!("branch {} current_limit must be > 0", br.id));
            }
        }
        for (i, g) in self.generators.iter().enumerate() {
            if !ids.contains(&g.bus) {
                return inv(format!("generator {} references unknown bus {}", i, g.bus));
            }
            if !(g.inertia_h > 0.0) {
                return inv(format!("generator {} inertia_h must be > 0", i));
            }
            if !(g.transient_reactance > 0.0) {
                return inv(format!("generator {} transient_reactance must be > 0", i));
            }
            if !(g.governor_droop >= 0.0) {
                return inv(format!("generator {} governor_droop must be >= 0", i));
            }
            if !(g.machine_base > 0.0) {
                return inv(format!("generator {} machine_base must be > 0", i));
            }
            if g.governor_droop > 0.0 && !(g.governor_time_const > 0.0) {
                return inv(format!("generator {} governor_time_const must be > 0", i));
            }
        }
        for (i, l) in self.loads.iter().enumerate() {
            if !ids.contains(&l.bus) {
                return inv(format!("load {} references unknown bus {}", i, l.bus));
            }
            if !l.p.is_finite() || !l.q.is_finite() {
                return inv(format!("load {} has non-finite demand", i));
            }
        }
        let slack = slacks[0].id;
        if !self.generators.iter().any(|g| g.bus == slack && g.in_service) {
            return inv(format!("slack bus {} hosts no in-service generator", slack));
        }
        let zones = self.zones();
        for tie in &self.tie_lines {
            let Some(br) = self.branch(*tie) else {
                return inv(format!("tie line {} is not a declared branch", tie));
            };
            let zf = zones[&br.from_bus] == self.island_zone;
            let zt = zones[&br.to_bus] == self.island_zone;
            if zf == zt {
                return inv(format!(
                    "tie line {} does not cross the boundary of island zone {}",
                    tie, self.island_zone
                ));
            }
        }
        Ok(())
    }

    pub fn to_case_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[meta]");
        let _ = writeln!(s, "name {}", self.name);
        let _ = writeln!(s, "base_mva {}", self.base_mva);
        let _ = writeln!(s, "nominal_freq {}", self.nominal_freq);
        let _ = writeln!(s, "island_zone {}", self.island_zone);
        let ties: Vec<String> = self.tie_lines.iter().map(|t| t.to_string()).collect();
        let _ = writeln!(s, "tie_lines {}", ties.join(" "));
        let _ = writeln!(s, "\n[bus]");
        for b in &self.buses {
            let _ = writeln!(
                s,
                "{} {} {} {}",
                b.id,
                b.kind.as_str(),
                b.voltage_setpoint,
                b.zone
            );
        }
        let _ = writeln!(s, "\n[branch]");
        for br in &self.branches {
            let _ = writeln!(
                s,
                "{} {} {} {} {} {} {} {}",
                br.id,
                br.from_bus,
                br.to_bus,
                br.resistance,
                br.reactance,
                br.shunt_susceptance,
                br.current_limit,
                u8::from(br.in_service)
            );
        }
        let _ = writeln!(s, "\n[gen]");
        for g in &self.generators {
            let _ = writeln!(
                s,
                "{} {} {} {} {} {} {} {} {} {} {}",
                g.bus,
                g.p_set,
                g.q_min,
                g.q_max,
                g.inertia_h,
                g.damping_d,
                g.transient_reactance,
                g.governor_droop,
                g.governor_time_const,
                g.machine_base,
                u8::from(g.in_service)
            );
        }
        let _ = writeln!(s, "\n[load]");
        for l in &self.loads {
            let _ = writeln!(s, "{} {} {} {}", l.bus, l.p, l.q, u8::from(l.in_service));
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CaseError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_case_string()).map_err(|source| CaseError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

impl std::str::FromStr for NetworkCase {
    type Err = CaseError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        parse_case(text)
    }
}

pub fn load_case(path: impl AsRef<Path>) -> Result<NetworkCase, CaseError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| CaseError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_case(&text)
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    None,
    Meta,
    Bus,
    Branch,
    Gen,
    Load,
}

const BUS_FIELDS: [&str; 4] = ["id", "type", "vset", "zone"];
const BRANCH_FIELDS: [&str; 8] = ["id", "from", "to", "r", "x", "b", "limit", "status"];
const GEN_FIELDS: [&str; 11] = [
    "bus", "p_set", "q_min", "q_max", "h", "d", "xd'", "droop", "t_gov", "mbase", "status",
];
const LOAD_FIELDS: [&str; 4] = ["bus", "p", "q", "status"];

struct Record<'a> {
    line: usize,
    names: &'a [&'a str],
    fields: Vec<&'a str>,
}

impl<'a> Record<'a> {
    fn new(line: usize, names: &'a [&'a str], fields: Vec<&'a str>) -> Result<Self, CaseError> {
        if fields.len() != names.len() {
            return Err(CaseError::Parse {
                line,
                field: names.get(fields.len()).unwrap_or(&"<extra>").to_string(),
                message: format!("expected {} fields, found {}", names.len(), fields.len()),
            });
        }
        Ok(Record { line, names, fields })
    }

    fn err(&self, i: usize, message: impl Into<String>) -> CaseError {
        CaseError::Parse {
            line: self.line,
            field: self.names[i].to_string(),
            message: message.into(),
        }
    }

    fn f64(&self, i: usize) -> Result<f64, CaseError> {
        let v: f64 = self.fields[i]
            .parse()
            .map_err(|_| self.err(i, format!("`{}` is not a number", self.fields[i])))?;
        if !v.is_finite() {
            return Err(self.err(i, "value must be finite"));
        }
        Ok(v)
    }

    fn u32(&self, i: usize) -> Result<u32, CaseError> {
        self.fields[i]
            .parse()
            .map_err(|_| self.err(i, format!("`{}` is not an integer id", self.fields[i])))
    }

    fn flag(&self, i: usize) -> Result<bool, CaseError> {
        match self.fields[i] {
            "1" => Ok(true),
            "0" => Ok(false),
            other => Err(self.err(i, format!("status must be 0 or 1, got `{other}`"))),
        }
    }
}

fn parse_case(text: &str) -> Result<NetworkCase, CaseError> {
    let mut section = Section::None;
    let mut name = String::from("unnamed");
    let mut base_mva = None;
    let mut nominal_freq = None;
    let mut island_zone = None;
    let mut tie_lines = Vec::new();
    let mut buses = Vec::new();
    let mut branches = Vec::new();
    let mut generators = Vec::new();
    let mut loads = Vec::new();
    let mut saw_content = false;

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        saw_content = true;
        if content.starts_with('[') {
            section = match content {
                "[meta]" => Section::Meta,
                "[bus]" => Section::Bus,
                "[branch]" => Section::Branch,
                "[gen]" => Section::Gen,
                "[load]" => Section::Load,
                other => {
                    return Err(CaseError::Parse {
                        line,
                        field: "section".into(),
                        message: format!("unknown section {other}"),
                    })
                }
            };
            continue;
        }
        let fields: Vec<&str> = content.split_whitespace().collect();
        match section {
            Section::None => {
                return Err(CaseError::Parse {
                    line,
                    field: "section".into(),
                    message: "record before any section header".into(),
                })
            }
            Section::Meta => {
                let key = fields[0];
                let rest = &fields[1..];
                let num = |field: &str| -> Result<f64, CaseError> {
                    rest.first()
                        .and_then(|v| v.parse::<f64>().ok())
                        .ok_or_else(|| CaseError::Parse {
                            line,
                            field: field.into(),
                            message: "expected a number".into(),
                        })
                };
                match key {
                    "name" => name = rest.join(" "),
                    "base_mva" => base_mva = Some(num("base_mva")?),
                    "nominal_freq" => nominal_freq = Some(num("nominal_freq")?),
                    "island_zone" => island_zone = Some(num("island_zone")? as ZoneId),
                    "tie_lines" => {
                        tie_lines = rest
                            .iter()
                            .map(|v| {
                                v.parse::<BranchId>().map_err(|_| CaseError::Parse {
                                    line,
                                    field: "tie_lines".into(),
                                    message: format!("`{v}` is not a branch id"),
                                })
                            })
                            .collect::<Result<_, _>>()?
                    }
                    other => {
                        return Err(CaseError::Parse {
                            line,
                            field: other.into(),
                            message: "unknown meta key".into(),
                        })
                    }
                }
            }
            Section::Bus => {
                let r = Record::new(line, &BUS_FIELDS, fields)?;
                buses.push(Bus {
                    id: r.u32(0)?,
                    kind: BusType::parse(r.fields[1])
                        .ok_or_else(|| r.err(1, "expected slack, pv or pq"))?,
                    voltage_setpoint: r.f64(2)?,
                    zone: r.u32(3)?,
                });
            }
            Section::Branch => {
                let r = Record::new(line, &BRANCH_FIELDS, fields)?;
                branches.push(Branch {
                    id: r.u32(0)?,
                    from_bus: r.u32(1)?,
                    to_bus: r.u32(2)?,
                    resistance: r.f64(3)?,
                    reactance: r.f64(4)?,
                    shunt_susceptance: r.f64(5)?,
                    current_limit: r.f64(6)?,
                    in_service: r.flag(7)?,
                });
            }
            Section::Gen => {
                let r = Record::new(line, &GEN_FIELDS, fields)?;
                generators.push(Generator {
                    bus: r.u32(0)?,
                    p_set: r.f64(1)?,
                    q_min: r.f64(2)?,
                    q_max: r.f64(3)?,
                    inertia_h: r.f64(4)?,
                    damping_d: r.f64(5)?,
                    transient_reactance: r.f64(6)?,
                    governor_droop: r.f64(7)?,
                    governor_time_const: r.f64(8)?,
                    machine_base: r.f64(9)?,
                    in_service: r.flag(10)?,
                });
            }
            Section::Load => {
                let r = Record::new(line, &LOAD_FIELDS, fields)?;
                loads.push(Load {
                    bus: r.u32(0)?,
                    p: r.f64(1)?,
                    q: r.f64(2)?,
                    in_service: r.flag(3)?,
                });
            }
        }
    }

    let missing = |field: &str| CaseError::Parse {
        line: text.lines().count().max(1),
        field: field.into(),
        message: "required [meta] key missing".into(),
    };
    if !saw_content {
        return Err(CaseError::Parse {
            line: 1,
            field: "file".into(),
            message: "empty case file".into(),
        });
    }
    let case = NetworkCase {
        name,
        buses,
        branches,
        generators,
        loads,
        tie_lines,
        island_zone: island_zone.ok_or_else(|| missing("island_zone"))?,
        base_mva: base_mva.ok_or_else(|| missing("base_mva"))?,
        nominal_freq: nominal_freq.ok_or_else(|| missing("nominal_freq"))?,
    };
    case.validate()?;
    Ok(case)
}

/// Solved steady state. Vectors are aligned with `buses`; generator and
/// branch results are indexed like the case's `generators` / `branches`
/// and are `None` for elements outside the solved area or out of service.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteadyState {
    pub buses: Vec<BusId>,
    pub vm: Vec<f64>,
    pub va_deg: Vec<f64>,
    pub branch_current: Vec<Option<f64>>,
    pub gen_dispatch: Vec<Option<(f64, f64)>>,
    pub converged: bool,
    pub iterations: usize,
    pub max_mismatch: f64,
}

impl SteadyState {
    pub fn voltage(&self, bus: BusId) -> Option<Complex64> {
        let i = self.buses.iter().position(|b| *b == bus)?;
        Some(Complex64::from_polar(self.vm[i], self.va_deg[i].to_radians()))
    }

    pub fn complex_voltages(&self) -> Vec<Complex64> {
        self.vm
            .iter()
            .zip(&self.va_deg)
            .map(|(m, a)| Complex64::from_polar(*m, a.to_radians()))
            .collect()
    }
}

/// True iff every bus magnitude lies within `[low, high]`.
pub fn voltage_band_ok(state: &SteadyState, band: (f64, f64)) -> Result<bool, PowerFlowError> {
    if !state.converged {
        return Err(PowerFlowError::NotConverged);
    }
    Ok(state.vm.iter().all(|v| *v >= band.0 && *v <= band.1))
}

/// Dense nodal admittance matrix over a subset of buses.
pub(crate) fn build_ybus(
    case: &NetworkCase,
    index: &BTreeMap<BusId, usize>,
    branch_ok: impl Fn(&Branch) -> bool,
) -> DMatrix<Complex64> {
    let n = index.len();
    let mut y = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    for br in case.branches.iter().filter(|b| branch_ok(b)) {
        let (Some(&f), Some(&t)) = (index.get(&br.from_bus), index.get(&br.to_bus)) else {
            continue;
        };
        let ys = br.series_admittance();
        let ysh = Complex64::new(0.0, br.shunt_susceptance / 2.0);
        y[(f, f)] += ys + ysh;
        y[(t, t)] += ys + ysh;
        y[(f, t)] -= ys;
        y[(t, f)] -= ys;
    }
    y
}

fn injections(y: &DMatrix<Complex64>, v: &[Complex64]) -> Vec<Complex64> {
    let n = v.len();
    (0..n)
        .map(|i| {
            let mut cur = Complex64::new(0.0, 0.0);
            for k in 0..n {
                cur += y[(i, k)] * v[k];
            }
            v[i] * cur.conj()
        })
        .collect()
}

/// Newton-Raphson power flow. With `island_only`, only the buses of that zone
/// and the branches internal to it are solved, with the zone's largest
/// in-service machine acting as slack.
pub fn solve_power_flow(
    case: &NetworkCase,
    island_only: Option<ZoneId>,
) -> Result<SteadyState, PowerFlowError> {
    solve_power_flow_with(case, island_only, 0.0)
}

/// Same as [`solve_power_flow`] with every initial angle guess shifted by
/// `angle_offset_deg`.
pub fn solve_power_flow_with(
    case: &NetworkCase,
    island_only: Option<ZoneId>,
    angle_offset_deg: f64,
) -> Result<SteadyState, PowerFlowError> {
    let bus_ids: Vec<BusId> = case
        .buses
        .iter()
        .filter(|b| island_only.is_none_or(|z| b.zone == z))
        .map(|b| b.id)
        .collect();
    let index: BTreeMap<BusId, usize> = bus_ids.iter().enumerate().map(|(i, b)| (*b, i)).collect();
    let n = bus_ids.len();

    let slack_bus = match island_only {
        None => case.slack_bus(),
        Some(zone) => {
            let mut best: Option<&Generator> = None;
            for g in case.generators.iter().filter(|g| g.in_service) {
                if !index.contains_key(&g.bus) {
                    continue;
                }
                if best.is_none_or(|b| g.machine_base > b.machine_base) {
                    best = Some(g);
                }
            }
            best.ok_or(PowerFlowError::NoIslandSlack(zone))?.bus
        }
    };
    let slack = index[&slack_bus];

    let mut p_spec = vec![0.0; n];
    let mut q_spec = vec![0.0; n];
    let mut q_lim = vec![(0.0, 0.0); n];
    let mut has_gen = vec![false; n];
    for g in case.generators.iter().filter(|g| g.in_service) {
        if let Some(&i) = index.get(&g.bus) {
            p_spec[i] += g.p_set;
            q_lim[i].0 += g.q_min;
            q_lim[i].1 += g.q_max;
            has_gen[i] = true;
        }
    }
    for l in case.loads.iter().filter(|l| l.in_service) {
        if let Some(&i) = index.get(&l.bus) {
            p_spec[i] -= l.p;
            q_spec[i] -= l.q;
        }
    }

    // Bus roles: 0 = slack, 1 = PV, 2 = PQ.
    let mut role = vec![2u8; n];
    let mut vm = vec![1.0; n];
    let mut va = vec![angle_offset_deg.to_radians(); n];
    for b in &case.buses {
        let Some(&i) = index.get(&b.id) else { continue };
        if i == slack {
            role[i] = 0;
            vm[i] = b.voltage_setpoint;
        } else if has_gen[i] && b.kind != BusType::Pq {
            role[i] = 1;
            vm[i] = b.voltage_setpoint;
        }
    }

    let ybus = build_ybus(case, &index, |br| br.in_service);
    let mut total_iter = 0;
    let mut converged = false;
    let mut max_mismatch = f64::INFINITY;

    for _pass in 0..4 {
        let (ok, it, mm) = newton(&ybus, &role, &p_spec, &q_spec, &mut vm, &mut va, total_iter)?;
        total_iter += it;
        max_mismatch = mm;
        converged = ok;
        if !ok {
            break;
        }
        // Reactive limit enforcement: PV buses exceeding their range become PQ.
        let v: Vec<Complex64> = (0..n).map(|i| Complex64::from_polar(vm[i], va[i])).collect();
        let s = injections(&ybus, &v);
        let mut switched = false;
        for i in 0..n {
            if role[i] != 1 {
                continue;
            }
            let q_gen = s[i].im - q_spec[i];
            let (lo, hi) = q_lim[i];
            if lo < hi && (q_gen > hi + 1e-9 || q_gen < lo - 1e-9) {
                role[i] = 2;
                q_spec[i] += q_gen.clamp(lo, hi);
                switched = true;
            }
        }
        if !switched {
            break;
        }
    }

    let v: Vec<Complex64> = (0..n).map(|i| Complex64::from_polar(vm[i], va[i])).collect();
    let s = injections(&ybus, &v);
    let slack_angle = va[slack];

    let branch_current = case
        .branches
        .iter()
        .map(|br| {
            let (Some(&f), Some(&t)) = (index.get(&br.from_bus), index.get(&br.to_bus)) else {
                return None;
            };
            if !br.in_service {
                return None;
            }
            let ys = br.series_admittance();
            let ysh = Complex64::new(0.0, br.shunt_susceptance / 2.0);
            let i_from = (v[f] - v[t]) * ys + v[f] * ysh;
            let i_to = (v[t] - v[f]) * ys + v[t] * ysh;
            Some(i_from.norm().max(i_to.norm()))
        })
        .collect();

    // Bus-level generation is shared across machines on the bus.
    let mut gen_dispatch = vec![None; case.generators.len()];
    let mut bus_gens: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (gi, g) in case.generators.iter().enumerate() {
        if g.in_service {
            if let Some(&i) = index.get(&g.bus) {
                bus_gens.entry(i).or_default().push(gi);
            }
        }
    }
    let load_at = |i: usize| -> Complex64 {
        case.loads
            .iter()
            .filter(|l| l.in_service && index.get(&l.bus) == Some(&i))
            .map(|l| Complex64::new(l.p, l.q))
            .sum()
    };
    for (&i, gens) in &bus_gens {
        let s_gen = s[i] + load_at(i);
        let total_base: f64 = gens.iter().map(|&g| case.generators[g].machine_base).sum();
        let p_fixed: f64 = gens.iter().map(|&g| case.generators[g].p_set).sum();
        for &g in gens {
            let share = case.generators[g].machine_base / total_base;
            let p = if role[i] == 0 {
                s_gen.re * share
            } else {
                case.generators[g].p_set + (s_gen.re - p_fixed) * share
            };
            gen_dispatch[g] = Some((p, s_gen.im * share));
        }
    }

    Ok(SteadyState {
        buses: bus_ids,
        vm: vm.clone(),
        va_deg: va.iter().map(|a| (a - slack_angle).to_degrees()).collect(),
        branch_current,
        gen_dispatch,
        converged,
        iterations: total_iter,
        max_mismatch,
    })
}

/// Runs Newton iterations in place. Returns (converged, iterations, final mismatch).
fn newton(
    ybus: &DMatrix<Complex64>,
    role: &[u8],
    p_spec: &[f64],
    q_spec: &[f64],
    vm: &mut [f64],
    va: &mut [f64],
    iter_base: usize,
) -> Result<(bool, usize, f64), PowerFlowError> {
    let n = vm.len();
    let pvpq: Vec<usize> = (0..n).filter(|&i| role[i] != 0).collect();
    let pq: Vec<usize> = (0..n).filter(|&i| role[i] == 2).collect();
    let np = pvpq.len();
    let dim = np + pq.len();

    let mismatch = |vm: &[f64], va: &[f64]| -> (Vec<f64>, f64) {
        let v: Vec<Complex64> = (0..n).map(|i| Complex64::from_polar(vm[i], va[i])).collect();
        let s = injections(ybus, &v);
        let mut f = Vec::with_capacity(dim);
        for &i in &pvpq {
            f.push(s[i].re - p_spec[i]);
        }
        for &i in &pq {
            f.push(s[i].im - q_spec[i]);
        }
        let m = f.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        (f, m)
    };

    let (mut f, mut mm) = mismatch(vm, va);
    if !mm.is_finite() {
        return Ok((false, 0, mm));
    }
    if mm <= PF_TOLERANCE {
        return Ok((true, 0, mm));
    }
    for it in 1..=PF_MAX_ITER {
        let jac = jacobian(ybus, vm, va, &pvpq, &pq);
        let rhs = DVector::from_iterator(dim, f.iter().map(|x| -x));
        let dx = jac
            .lu()
            .solve(&rhs)
            .filter(|dx| dx.iter().all(|x| x.is_finite()))
            .ok_or(PowerFlowError::SingularJacobian {
                iteration: iter_base + it,
            })?;
        for (k, &i) in pvpq.iter().enumerate() {
            va[i] += dx[k];
        }
        for (k, &i) in pq.iter().enumerate() {
            vm[i] += dx[np + k];
        }
        (f, mm) = mismatch(vm, va);
        if !mm.is_finite() {
            return Ok((false, it, mm));
        }
        if mm <= PF_TOLERANCE {
            return Ok((true, it, mm));
        }
    }
    Ok((false, PF_MAX_ITER, mm))
}

fn jacobian(
    ybus: &DMatrix<Complex64>,
    vm: &[f64],
    va: &[f64],
    pvpq: &[usize],
    pq: &[usize],
) -> DMatrix<f64> {
    let n = vm.len();
    let v: Vec<Complex64> = (0..n).map(|i| Complex64::from_polar(vm[i], va[i])).collect();
    let ibus: Vec<Complex64> = (0..n)
        .map(|i| (0..n).map(|k| ybus[(i, k)] * v[k]).sum())
        .collect();
    // dS/dVa and dS/dVm in the usual complex form.
    let j = Complex64::new(0.0, 1.0);
    let ds_dva = |i: usize, k: usize| -> Complex64 {
        let mut d = -j * v[i] * (ybus[(i, k)] * v[k]).conj();
        if i == k {
            d += j * v[i] * ibus[i].conj();
        }
        d
    };
    let ds_dvm = |i: usize, k: usize| -> Complex64 {
        let vn_k = v[k] / vm[k];
        let mut d = v[i] * (ybus[(i, k)] * vn_k).conj();
        if i == k {
            d += ibus[i].conj() * v[i] / vm[i];
        }
        d
    };
    let np = pvpq.len();
    let dim = np + pq.len();
    let mut jac = DMatrix::zeros(dim, dim);
    for (r, &i) in pvpq.iter().enumerate() {
        for (c, &k) in pvpq.iter().enumerate() {
            jac[(r, c)] = ds_dva(i, k).re;
        }
        for (c, &k) in pq.iter().enumerate() {
            jac[(r, np + c)] = ds_dvm(i, k).re;
        }
    }
    for (r, &i) in pq.iter().enumerate() {
        for (c, &k) in pvpq.iter().enumerate() {
            jac[(np + r, c)] = ds_dva(i, k).im;
        }
        for (c, &k) in pq.iter().enumerate() {
            jac[(np + r, np + c)] = ds_dvm(i, k).im;
        }
    }
    jac
}

/// Recomputes the worst active/reactive mismatch of a solved state against the
/// case's specified injections, skipping the slack and (for Q) generator buses.
pub fn power_mismatch(case: &NetworkCase, state: &SteadyState) -> f64 {
    let index: BTreeMap<BusId, usize> = state
        .buses
        .iter()
        .enumerate()
        .map(|(i, b)| (*b, i))
        .collect();
    let ybus = build_ybus(case, &index, |br| br.in_service);
    let v = state.complex_voltages();
    let s = injections(&ybus, &v);
    let mut worst = 0.0f64;
    for (i, bus) in state.buses.iter().enumerate() {
        let mut spec = Complex64::new(0.0, 0.0);
        let mut gen_here = false;
        for (g, d) in case.generators.iter().zip(&state.gen_dispatch) {
            if g.bus == *bus {
                if let Some((p, q)) = d {
                    spec += Complex64::new(*p, *q);
                    gen_here = true;
                }
            }
        }
        for l in case.loads.iter().filter(|l| l.in_service && l.bus == *bus) {
            spec -= Complex64::new(l.p, l.q);
        }
        let dp = (s[i].re - spec.re).abs();
        let dq = if gen_here { 0.0 } else { (s[i].im - spec.im).abs() };
        worst = worst.max(dp).max(dq);
    }
    worst
}
