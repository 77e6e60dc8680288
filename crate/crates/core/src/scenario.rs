//! Operating-point and initial-condition generation.
//!
//! Operating points shuffle load locations and then scale every load;
//! initial conditions only scale the loads of their operating point.
//! A candidate is kept only if its power flow converges with every bus
//! magnitude inside the configured band; otherwise it is redrawn.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::RngExt;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::netcase::{self, BusId, NetworkCase, SteadyState};
use crate::rng::{rng_for, ChaCha8Rng};

const TAG_OP: u64 = 0x4f50;
const TAG_IC: u64 = 0x4943;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("invalid diversification config: {0}")]
    Config(String),
    #[error("gave up after {rejected} rejections with {accepted} of {requested} candidates accepted")]
    Exhausted {
        requested: usize,
        accepted: usize,
        rejected: usize,
    },
    #[error("manifest error: {0}")]
    Manifest(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversificationConfig {
    /// Lower scaling bound: factors are drawn from `[-a, b]`.
    pub a: f64,
    pub b: f64,
    pub shuffle_loads: bool,
    pub voltage_band: (f64, f64),
    pub seed: u64,
    /// Total rejections allowed; `None` means 50 per requested candidate.
    pub max_rejects: Option<usize>,
}

impl Default for DiversificationConfig {
    fn default() -> Self {
        Self {
            a: 0.3,
            b: 0.3,
            shuffle_loads: true,
            voltage_band: (0.9, 1.1),
            seed: 0,
            max_rejects: None,
        }
    }
}

impl DiversificationConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.a >= 0.0 && self.a < 1.0) {
            return Err(ScenarioError::Config(format!("a = {} must lie in [0, 1)", self.a)));
        }
        if !(self.b >= 0.0) || !self.b.is_finite() {
            return Err(ScenarioError::Config(format!("b = {} must be >= 0", self.b)));
        }
        let (lo, hi) = self.voltage_band;
        if !(lo <= hi) {
            return Err(ScenarioError::Config(format!(
                "voltage band [{lo}, {hi}] is inverted"
            )));
        }
        Ok(())
    }

    fn reject_budget(&self, count: usize) -> usize {
        self.max_rejects.unwrap_or(50 * count)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadEntry {
    pub bus: BusId,
    pub p: f64,
    pub q: f64,
}

/// One entry per load of the case, in case order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadProfile(pub Vec<LoadEntry>);

impl LoadProfile {
    pub fn from_case(case: &NetworkCase) -> Self {
        LoadProfile(
            case.loads
                .iter()
                .map(|l| LoadEntry {
                    bus: l.bus,
                    p: l.p,
                    q: l.q,
                })
                .collect(),
        )
    }

    /// Copy of `case` carrying this profile's demand.
    pub fn apply(&self, case: &NetworkCase) -> NetworkCase {
        let mut out = case.clone();
        for (load, e) in out.loads.iter_mut().zip(&self.0) {
            load.bus = e.bus;
            load.p = e.p;
            load.q = e.q;
        }
        out
    }

    pub fn total(&self) -> (f64, f64) {
        self.0
            .iter()
            .fold((0.0, 0.0), |(p, q), e| (p + e.p, q + e.q))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub id: u32,
    pub case_fingerprint: String,
    pub load_profile: LoadProfile,
    pub steady_state: SteadyState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct IcId {
    pub op: u32,
    pub index: u32,
}

impl fmt::Display for IcId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.op, self.index)
    }
}

impl std::str::FromStr for IcId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (op, index) = s.split_once('.').ok_or_else(|| format!("bad ic id `{s}`"))?;
        Ok(IcId {
            op: op.parse().map_err(|_| format!("bad ic id `{s}`"))?,
            index: index.parse().map_err(|_| format!("bad ic id `{s}`"))?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialCondition {
    pub id: IcId,
    pub operating_point_id: u32,
    pub load_profile: LoadProfile,
    pub steady_state: SteadyState,
}

/// Draws one scaling factor from `U(-a, b)`.
pub fn draw_scale_factor(cfg: &DiversificationConfig, rng: &mut ChaCha8Rng) -> f64 {
    if cfg.a == 0.0 && cfg.b == 0.0 {
        // Keep the stream aligned with the general case.
        let _: f64 = rng.random();
        return 0.0;
    }
    rng.random_range(-cfg.a..=cfg.b)
}

/// `P_new = P_old (1 + θ)`, `Q_new = Q_old (1 + γ)` with independent draws
/// per load and per component.
pub fn scale_loads(
    profile: &LoadProfile,
    cfg: &DiversificationConfig,
    rng: &mut ChaCha8Rng,
) -> LoadProfile {
    LoadProfile(
        profile
            .0
            .iter()
            .map(|e| {
                let theta = draw_scale_factor(cfg, rng);
                let gamma = draw_scale_factor(cfg, rng);
                LoadEntry {
                    bus: e.bus,
                    p: e.p + theta * e.p,
                    q: e.q + gamma * e.q,
                }
            })
            .collect(),
    )
}

/// Permutes the (p, q) pairs over the load locations.
pub fn shuffle_load_locations(profile: &LoadProfile, rng: &mut ChaCha8Rng) -> LoadProfile {
    let mut demand: Vec<(f64, f64)> = profile.0.iter().map(|e| (e.p, e.q)).collect();
    demand.shuffle(rng);
    LoadProfile(
        profile
            .0
            .iter()
            .zip(demand)
            .map(|(e, (p, q))| LoadEntry { bus: e.bus, p, q })
            .collect(),
    )
}

/// Solves the power flow for `profile` and checks the voltage band.
pub fn accept(
    case: &NetworkCase,
    profile: &LoadProfile,
    band: (f64, f64),
) -> Option<SteadyState> {
    let st = netcase::solve_power_flow(&profile.apply(case), None).ok()?;
    if st.converged && netcase::voltage_band_ok(&st, band).unwrap_or(false) {
        Some(st)
    } else {
        None
    }
}

/// Evaluates candidates `0, 1, 2, ...` (in parallel batches) and keeps the
/// first `count` accepted ones in index order. Returns the accepted
/// `(candidate index, value)` pairs.
fn accept_in_order<T: Send>(
    count: usize,
    max_rejects: usize,
    eval: impl Fn(u64) -> Option<T> + Sync,
) -> Result<Vec<(u64, T)>, ScenarioError> {
    let mut accepted = Vec::with_capacity(count);
    let mut rejected = 0usize;
    let mut next = 0u64;
    while accepted.len() < count {
        let batch = ((count - accepted.len()) * 2).clamp(4, 256) as u64;
        let results: Vec<(u64, Option<T>)> = (next..next + batch)
            .into_par_iter()
            .map(|k| (k, eval(k)))
            .collect();
        next += batch;
        for (k, r) in results {
            if accepted.len() == count {
                break;
            }
            match r {
                Some(v) => accepted.push((k, v)),
                None => {
                    rejected += 1;
                    if rejected > max_rejects {
                        return Err(ScenarioError::Exhausted {
                            requested: count,
                            accepted: accepted.len(),
                            rejected,
                        });
                    }
                }
            }
        }
    }
    Ok(accepted)
}

pub fn generate_operating_points(
    case: &NetworkCase,
    cfg: &DiversificationConfig,
    count: usize,
) -> Result<Vec<OperatingPoint>, ScenarioError> {
    Ok(generate_operating_points_indexed(case, cfg, count)?
        .into_iter()
        .map(|(_, op)| op)
        .collect())
}

/// Like [`generate_operating_points`] but also returns each point's
/// candidate index (what the manifest records).
pub fn generate_operating_points_indexed(
    case: &NetworkCase,
    cfg: &DiversificationConfig,
    count: usize,
) -> Result<Vec<(u64, OperatingPoint)>, ScenarioError> {
    cfg.validate()?;
    if count == 0 {
        return Err(ScenarioError::Config("count must be >= 1".into()));
    }
    let base = LoadProfile::from_case(case);
    let fingerprint = case.fingerprint();
    let found = accept_in_order(count, cfg.reject_budget(count), |k| {
        let profile = operating_point_candidate(&base, cfg, k);
        accept(case, &profile, cfg.voltage_band).map(|st| (profile, st))
    })?;
    Ok(found
        .into_iter()
        .enumerate()
        .map(|(i, (k, (profile, st)))| {
            (
                k,
                OperatingPoint {
                    id: i as u32,
                    case_fingerprint: fingerprint.clone(),
                    load_profile: profile,
                    steady_state: st,
                },
            )
        })
        .collect())
}

fn operating_point_candidate(base: &LoadProfile, cfg: &DiversificationConfig, k: u64) -> LoadProfile {
    let mut rng = rng_for(cfg.seed, TAG_OP, k);
    let shuffled = if cfg.shuffle_loads {
        shuffle_load_locations(base, &mut rng)
    } else {
        base.clone()
    };
    scale_loads(&shuffled, cfg, &mut rng)
}

fn initial_condition_candidate(
    op: &OperatingPoint,
    cfg: &DiversificationConfig,
    k: u64,
) -> LoadProfile {
    let mut rng = rng_for(cfg.seed, TAG_IC ^ ((op.id as u64) << 32), k);
    scale_loads(&op.load_profile, cfg, &mut rng)
}

pub fn generate_initial_conditions(
    case: &NetworkCase,
    op: &OperatingPoint,
    cfg: &DiversificationConfig,
    count: usize,
) -> Result<Vec<InitialCondition>, ScenarioError> {
    Ok(generate_initial_conditions_indexed(case, op, cfg, count)?
        .into_iter()
        .map(|(_, ic)| ic)
        .collect())
}

pub fn generate_initial_conditions_indexed(
    case: &NetworkCase,
    op: &OperatingPoint,
    cfg: &DiversificationConfig,
    count: usize,
) -> Result<Vec<(u64, InitialCondition)>, ScenarioError> {
    cfg.validate()?;
    if count == 0 {
        return Err(ScenarioError::Config("count must be >= 1".into()));
    }
    let found = accept_in_order(count, cfg.reject_budget(count), |k| {
        let profile = initial_condition_candidate(op, cfg, k);
        accept(case, &profile, cfg.voltage_band).map(|st| (profile, st))
    })?;
    Ok(found
        .into_iter()
        .enumerate()
        .map(|(i, (k, (profile, st)))| {
            (
                k,
                InitialCondition {
                    id: IcId {
                        op: op.id,
                        index: i as u32,
                    },
                    operating_point_id: op.id,
                    load_profile: profile,
                    steady_state: st,
                },
            )
        })
        .collect())
}

/// Everything needed to regenerate a scenario set exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioManifest {
    pub version: u32,
    pub case_name: String,
    pub case_fingerprint: String,
    pub config: DiversificationConfig,
    pub operating_points: Vec<ManifestOp>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestOp {
    pub id: u32,
    pub candidate: u64,
    pub load_profile: LoadProfile,
    pub initial_conditions: Vec<ManifestIc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestIc {
    pub id: IcId,
    pub candidate: u64,
    pub load_profile: LoadProfile,
}

pub const MANIFEST_VERSION: u32 = 1;

/// Operating points with their accepted initial conditions.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSet {
    pub manifest: ScenarioManifest,
    pub operating_points: Vec<OperatingPoint>,
    pub initial_conditions: Vec<InitialCondition>,
}

pub fn generate_scenarios(
    case: &NetworkCase,
    cfg: &DiversificationConfig,
    ops: usize,
    ics_per_op: usize,
) -> Result<ScenarioSet, ScenarioError> {
    let points = generate_operating_points_indexed(case, cfg, ops)?;
    let mut manifest_ops = Vec::with_capacity(points.len());
    let mut conditions = Vec::new();
    let mut operating_points = Vec::with_capacity(points.len());
    for (cand, op) in points {
        let ics = generate_initial_conditions_indexed(case, &op, cfg, ics_per_op)?;
        manifest_ops.push(ManifestOp {
            id: op.id,
            candidate: cand,
            load_profile: op.load_profile.clone(),
            initial_conditions: ics
                .iter()
                .map(|(k, ic)| ManifestIc {
                    id: ic.id,
                    candidate: *k,
                    load_profile: ic.load_profile.clone(),
                })
                .collect(),
        });
        conditions.extend(ics.into_iter().map(|(_, ic)| ic));
        operating_points.push(op);
    }
    Ok(ScenarioSet {
        manifest: ScenarioManifest {
            version: MANIFEST_VERSION,
            case_name: case.name.clone(),
            case_fingerprint: case.fingerprint(),
            config: cfg.clone(),
            operating_points: manifest_ops,
        },
        operating_points,
        initial_conditions: conditions,
    })
}

impl ScenarioManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ScenarioError> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| ScenarioError::Manifest(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| ScenarioError::Manifest(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| ScenarioError::Manifest(e.to_string()))?;
        let m: ScenarioManifest =
            serde_json::from_str(&text).map_err(|e| ScenarioError::Manifest(e.to_string()))?;
        if m.version != MANIFEST_VERSION {
            return Err(ScenarioError::Manifest(format!(
                "unsupported manifest version {}",
                m.version
            )));
        }
        Ok(m)
    }

    /// Re-solves every recorded profile against `case`.
    pub fn rebuild(&self, case: &NetworkCase) -> Result<ScenarioSet, ScenarioError> {
        if case.fingerprint() != self.case_fingerprint {
            return Err(ScenarioError::Manifest(format!(
                "case fingerprint {} does not match manifest {}",
                case.fingerprint(),
                self.case_fingerprint
            )));
        }
        let solve = |p: &LoadProfile| -> Result<SteadyState, ScenarioError> {
            accept(case, p, self.config.voltage_band)
                .ok_or_else(|| ScenarioError::Manifest("recorded profile no longer accepted".into()))
        };
        let mut ops = Vec::new();
        let mut ics = Vec::new();
        for op in &self.operating_points {
            ops.push(OperatingPoint {
                id: op.id,
                case_fingerprint: self.case_fingerprint.clone(),
                load_profile: op.load_profile.clone(),
                steady_state: solve(&op.load_profile)?,
            });
            for ic in &op.initial_conditions {
                ics.push(InitialCondition {
                    id: ic.id,
                    operating_point_id: op.id,
                    load_profile: ic.load_profile.clone(),
                    steady_state: solve(&ic.load_profile)?,
                });
            }
        }
        Ok(ScenarioSet {
            manifest: self.clone(),
            operating_points: ops,
            initial_conditions: ics,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;

    fn profile(values: &[(f64, f64)]) -> LoadProfile {
        LoadProfile(
            values
                .iter()
                .enumerate()
                .map(|(i, (p, q))| LoadEntry {
                    bus: i as u32 + 1,
                    p: *p,
                    q: *q,
                })
                .collect(),
        )
    }

    #[test]
    fn zero_bounds_leave_profile_unchanged() {
        let cfg = DiversificationConfig {
            a: 0.0,
            b: 0.0,
            ..Default::default()
        };
        let p = profile(&[(1.0, 0.5), (2.0, -0.1)]);
        assert_eq!(scale_loads(&p, &cfg, &mut rng(3)), p);
    }

    #[test]
    fn substitution_into_scaling_rule() {
        // P_new = P_old + θ P_old with θ = -0.2.
        let p_old = 100.0;
        let theta = -0.2;
        assert_eq!(p_old + theta * p_old, 80.0);
    }

    #[test]
    fn scaling_golden_stream() {
        let cfg = DiversificationConfig {
            a: 0.3,
            b: 0.3,
            ..Default::default()
        };
        let base = profile(&[(1.0, 1.0); 10]);
        let out = scale_loads(&base, &cfg, &mut rng(2024));
        let golden = golden_scaled();
        for (e, g) in out.0.iter().zip(golden.iter()) {
            assert_eq!((e.p, e.q), *g);
        }
        for e in &out.0 {
            assert!(e.p >= 0.7 && e.p <= 1.3 && e.q >= 0.7 && e.q <= 1.3);
        }
    }

    fn golden_scaled() -> Vec<(f64, f64)> {
        let text = include_str!("../tests/golden/scale_seed2024.txt");
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let mut it = l.split_whitespace().map(|v| v.parse::<f64>().unwrap());
                (it.next().unwrap(), it.next().unwrap())
            })
            .collect()
    }

    #[test]
    fn single_load_shuffle_is_identity() {
        let p = profile(&[(1.5, 0.2)]);
        assert_eq!(shuffle_load_locations(&p, &mut rng(1)), p);
    }

    #[test]
    fn two_load_shuffle_is_identity_or_swap() {
        let p = profile(&[(1.0, 0.0), (2.0, 0.0)]);
        for s in 0..20 {
            let out = shuffle_load_locations(&p, &mut rng(s));
            let ps: Vec<f64> = out.0.iter().map(|e| e.p).collect();
            assert!(ps == vec![1.0, 2.0] || ps == vec![2.0, 1.0]);
            assert_eq!(out.total().0, 3.0);
        }
    }

    #[test]
    fn shuffle_golden_permutation() {
        let p = profile(&[(1.0, 0.1), (2.0, 0.2), (3.0, 0.3), (4.0, 0.4), (5.0, 0.5)]);
        let out = shuffle_load_locations(&p, &mut rng(11));
        let ps: Vec<f64> = out.0.iter().map(|e| e.p).collect();
        let golden: Vec<f64> = include_str!("../tests/golden/shuffle_seed11.txt")
            .split_whitespace()
            .map(|v| v.parse().unwrap())
            .collect();
        assert_eq!(ps, golden);
        for e in &out.0 {
            assert!((e.q - e.p / 10.0).abs() < 1e-15, "pairs move together");
        }
    }

    #[test]
    fn config_validation() {
        let bad = DiversificationConfig {
            a: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = DiversificationConfig {
            voltage_band: (1.1, 0.9),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
