//! PMU snapshots, labeled datasets and train/test split protocols.
//!
//! A feature vector holds, for every PMU bus in ascending id order, the
//! voltage magnitude (p.u.) followed by the angle in degrees wrapped to
//! (-180, 180].
//!
//! Dataset file (`.ds`): comma-separated text, version 1.
//!
//! ```text
//! # gridsync-dataset 1
//! # case <fingerprint>
//! # pmus <bus> <bus> ...
//! # adjacent <0|1> ...          one flag per PMU: next to a PCC
//! # dimension <n>
//! # columns ic,group,reconnect_time,label,vm.<bus>,va.<bus>,...
//! <ic>,<group>,<reconnect_time>,<+1|-1>,<f1>,...,<fn>
//! ```
//!
//! Numbers are written in shortest round-trip form, so saving a loaded
//! dataset reproduces the file byte for byte.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dynsim::{SimOutcome, StabilityLabel, Trace, TraceSample};
use crate::netcase::{BusId, NetworkCase};
use crate::rng::rng_for;
use crate::scenario::IcId;

pub const DATASET_VERSION: u32 = 1;
const DATASET_MAGIC: &str = "# gridsync-dataset ";
const TAG_SPLIT: u64 = 0x5350_4c49_54;

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("invalid PMU placement: {0}")]
    Placement(String),
    #[error("sample time {time} s is outside the usable trace (before reconnection at {reconnect} s, trace ends {end} s)")]
    SampleTime { time: f64, reconnect: f64, end: f64 },
    #[error("invalid split: {0}")]
    Split(String),
    #[error("split leaves the {0} side empty")]
    EmptySide(&'static str),
    #[error("unknown PMU bus {0}")]
    UnknownBus(BusId),
    #[error("{0}")]
    Metric(String),
    #[error("dataset format error at line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Wraps an angle in degrees to (-180, 180].
pub fn unwrap_angle(deg: f64) -> f64 {
    let r = deg.rem_euclid(360.0);
    if r > 180.0 {
        r - 360.0
    } else {
        r
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PmuPlacement {
    buses: Vec<BusId>,
    adjacent: Vec<bool>,
}

impl PmuPlacement {
    /// PMUs on `buses` (deduplicated and sorted). A PMU counts as adjacent
    /// when its bus is a PCC or shares a branch with one.
    pub fn new(case: &NetworkCase, buses: impl IntoIterator<Item = BusId>) -> Result<Self, FeatureError> {
        let set: BTreeSet<BusId> = buses.into_iter().collect();
        if set.is_empty() {
            return Err(FeatureError::Placement("no PMU buses".into()));
        }
        if let Some(b) = set.iter().find(|b| case.bus(**b).is_none()) {
            return Err(FeatureError::UnknownBus(*b));
        }
        let near = pcc_neighborhood(case);
        let buses: Vec<BusId> = set.into_iter().collect();
        let adjacent = buses.iter().map(|b| near.contains(b)).collect();
        Ok(PmuPlacement { buses, adjacent })
    }

    /// A PMU on every bus of the case.
    pub fn all(case: &NetworkCase) -> Self {
        PmuPlacement::new(case, case.buses.iter().map(|b| b.id)).expect("case has buses")
    }

    /// Placement restricted to buses next to a PCC.
    pub fn adjacent_to_pcc(case: &NetworkCase) -> Result<Self, FeatureError> {
        PmuPlacement::new(case, pcc_neighborhood(case))
    }

    pub fn buses(&self) -> &[BusId] {
        &self.buses
    }

    pub fn adjacent(&self) -> &[bool] {
        &self.adjacent
    }

    pub fn len(&self) -> usize {
        self.buses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buses.is_empty()
    }

    pub fn dimension(&self) -> usize {
        2 * self.buses.len()
    }

    pub fn column_names(&self) -> Vec<String> {
        self.buses
            .iter()
            .flat_map(|b| [format!("vm.{b}"), format!("va.{b}")])
            .collect()
    }
}

fn pcc_neighborhood(case: &NetworkCase) -> BTreeSet<BusId> {
    let pcc = case.pcc_buses();
    let mut near = pcc.clone();
    for br in &case.branches {
        if pcc.contains(&br.from_bus) {
            near.insert(br.to_bus);
        }
        if pcc.contains(&br.to_bus) {
            near.insert(br.from_bus);
        }
    }
    near
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub ic: IcId,
    pub reconnect_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub features: Vec<f64>,
    pub label: StabilityLabel,
    /// Operating point the example was generated from.
    pub group: u32,
    pub meta: ExampleMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<LabeledExample>,
    pub placement: PmuPlacement,
    pub case_fingerprint: String,
}

/// Default snapshot time: one PMU sample period before reconnection.
pub fn snapshot_time(reconnect_time: f64, sample_period: f64) -> f64 {
    reconnect_time - sample_period
}

/// Feature vector of one trace sample: `(|V|, unwrapped angle)` per PMU bus
/// in placement order.
pub fn sample_features(
    trace: &Trace,
    sample: &TraceSample,
    placement: &PmuPlacement,
) -> Result<Vec<f64>, FeatureError> {
    let mut features = Vec::with_capacity(placement.dimension());
    for b in placement.buses() {
        let i = trace.bus_position(*b).ok_or(FeatureError::UnknownBus(*b))?;
        features.push(sample.vm[i]);
        features.push(unwrap_angle(sample.va_deg[i]));
    }
    Ok(features)
}

/// Reads the PMU snapshot at (or the latest sample before) `sample_time`.
pub fn extract_example(
    outcome: &SimOutcome,
    placement: &PmuPlacement,
    sample_time: f64,
    ic: IcId,
) -> Result<LabeledExample, FeatureError> {
    let trace = &outcome.trace;
    let reconnect = outcome.schedule.reconnect_time.unwrap_or(f64::INFINITY);
    let out_of_range = || FeatureError::SampleTime {
        time: sample_time,
        reconnect,
        end: trace.end_time(),
    };
    if !(sample_time < reconnect) || sample_time > trace.end_time() + 1e-9 {
        return Err(out_of_range());
    }
    let sample = trace.sample_at_or_before(sample_time).ok_or_else(out_of_range)?;
    Ok(LabeledExample {
        features: sample_features(trace, sample, placement)?,
        label: outcome.label.label,
        group: ic.op,
        meta: ExampleMeta {
            ic,
            reconnect_time: reconnect,
        },
    })
}

impl Dataset {
    pub fn new(placement: PmuPlacement, case_fingerprint: impl Into<String>) -> Self {
        Dataset {
            examples: Vec::new(),
            placement,
            case_fingerprint: case_fingerprint.into(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.placement.dimension()
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn groups(&self) -> BTreeSet<u32> {
        self.examples.iter().map(|e| e.group).collect()
    }

    /// `(stable, unstable)` counts.
    pub fn class_counts(&self) -> (usize, usize) {
        let stable = self
            .examples
            .iter()
            .filter(|e| e.label == StabilityLabel::Stable)
            .count();
        (stable, self.examples.len() - stable)
    }

    pub fn labels(&self) -> Vec<StabilityLabel> {
        self.examples.iter().map(|e| e.label).collect()
    }

    fn with_examples(&self, examples: Vec<LabeledExample>) -> Dataset {
        Dataset {
            examples,
            placement: self.placement.clone(),
            case_fingerprint: self.case_fingerprint.clone(),
        }
    }

    /// Examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        self.with_examples(indices.iter().map(|i| self.examples[*i].clone()).collect())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{DATASET_MAGIC}{DATASET_VERSION}");
        let _ = writeln!(s, "# case {}", self.case_fingerprint);
        let join = |v: Vec<String>| v.join(" ");
        let _ = writeln!(s, "# pmus {}", join(self.placement.buses.iter().map(|b| b.to_string()).collect()));
        let _ = writeln!(
            s,
            "# adjacent {}",
            join(self.placement.adjacent.iter().map(|a| u8::from(*a).to_string()).collect())
        );
        let _ = writeln!(s, "# dimension {}", self.dimension());
        let _ = writeln!(
            s,
            "# columns ic,group,reconnect_time,label,{}",
            self.placement.column_names().join(",")
        );
        for e in &self.examples {
            let _ = write!(
                s,
                "{},{},{},{}",
                e.meta.ic,
                e.group,
                e.meta.reconnect_time,
                match e.label {
                    StabilityLabel::Stable => "+1",
                    StabilityLabel::Unstable => "-1",
                }
            );
            for f in &e.features {
                let _ = write!(s, ",{f}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, FeatureError> {
        let err = |line: usize, message: String| FeatureError::Format { line, message };
        let mut header: BTreeMap<&str, &str> = BTreeMap::new();
        let mut lines = text.lines().enumerate().peekable();
        let first = lines.next().ok_or_else(|| err(1, "empty file".into()))?.1;
        let version = first
            .strip_prefix(DATASET_MAGIC)
            .ok_or_else(|| err(1, "missing dataset header".into()))?;
        if version.trim() != DATASET_VERSION.to_string() {
            return Err(err(1, format!("unsupported dataset version {version}")));
        }
        while let Some((_, l)) = lines.peek() {
            let Some(rest) = l.strip_prefix("# ") else { break };
            let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
            header.insert(k, v);
            lines.next();
        }
        let get = |k: &str| header.get(k).copied().ok_or_else(|| err(1, format!("missing `{k}` header")));
        let buses: Vec<BusId> = get("pmus")?
            .split_whitespace()
            .map(|b| b.parse())
            .collect::<Result<_, _>>()
            .map_err(|e| err(3, format!("bad pmu list: {e}")))?;
        let adjacent: Vec<bool> = get("adjacent")?.split_whitespace().map(|a| a == "1").collect();
        if buses.is_empty() || adjacent.len() != buses.len() || !buses.windows(2).all(|w| w[0] < w[1]) {
            return Err(err(3, "pmu list must be nonempty, ascending and match the adjacency flags".into()));
        }
        let dim: usize = get("dimension")?
            .trim()
            .parse()
            .map_err(|e| err(5, format!("bad dimension: {e}")))?;
        if dim != 2 * buses.len() {
            return Err(err(5, format!("dimension {dim} does not match {} PMUs", buses.len())));
        }
        let placement = PmuPlacement { buses, adjacent };
        let mut examples = Vec::new();
        for (i, l) in lines {
            if l.trim().is_empty() {
                continue;
            }
            let lineno = i + 1;
            let fields: Vec<&str> = l.split(',').collect();
            if fields.len() != 4 + dim {
                return Err(err(lineno, format!("expected {} fields, found {}", 4 + dim, fields.len())));
            }
            let ic: IcId = fields[0].parse().map_err(|e: String| err(lineno, e))?;
            let group: u32 = fields[1].parse().map_err(|_| err(lineno, "bad group".into()))?;
            let reconnect_time: f64 = fields[2].parse().map_err(|_| err(lineno, "bad reconnect time".into()))?;
            let label = match fields[3] {
                "+1" | "1" => StabilityLabel::Stable,
                "-1" => StabilityLabel::Unstable,
                other => return Err(err(lineno, format!("bad label `{other}`"))),
            };
            let features: Vec<f64> = fields[4..]
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| err(lineno, format!("bad feature: {e}")))?;
            examples.push(LabeledExample {
                features,
                label,
                group,
                meta: ExampleMeta { ic, reconnect_time },
            });
        }
        Ok(Dataset {
            examples,
            placement,
            case_fingerprint: get("case")?.trim().to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FeatureError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|source| FeatureError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FeatureError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| FeatureError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Dataset::from_text(&text)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SplitMode {
    /// Train and test both drawn from one operating point.
    SingleOp { group: u32, train_fraction: f64 },
    /// Every operating point split by `train_fraction`.
    MultiOp { train_fraction: f64 },
    /// Train on the listed operating points, test on all others.
    UnseenOp { train_groups: BTreeSet<u32> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    #[serde(flatten)]
    pub mode: SplitMode,
    pub seed: u64,
}

fn check_fraction(f: f64) -> Result<(), FeatureError> {
    if f > 0.0 && f < 1.0 {
        Ok(())
    } else {
        Err(FeatureError::Split(format!("train fraction {f} must lie in (0, 1)")))
    }
}

/// Splits indices of each group: shuffled with a per-group stream, the first
/// `round(n * fraction)` go to training. Both sides keep dataset order.
fn split_groups(ds: &Dataset, groups: &BTreeSet<u32>, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for g in groups {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|i| ds.examples[*i].group == *g).collect();
        let n_train = (idx.len() as f64 * fraction).round() as usize;
        idx.shuffle(&mut rng_for(seed, TAG_SPLIT, *g as u64));
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset), FeatureError> {
    let groups = ds.groups();
    let (train, test) = match &spec.mode {
        SplitMode::SingleOp { group, train_fraction } => {
            check_fraction(*train_fraction)?;
            if !groups.contains(group) {
                return Err(FeatureError::Split(format!("operating point {group} is not in the dataset")));
            }
            split_groups(ds, &BTreeSet::from([*group]), *train_fraction, spec.seed)
        }
        SplitMode::MultiOp { train_fraction } => {
            check_fraction(*train_fraction)?;
            split_groups(ds, &groups, *train_fraction, spec.seed)
        }
        SplitMode::UnseenOp { train_groups } => {
            if train_groups.is_empty() || !train_groups.is_subset(&groups) || train_groups.len() == groups.len() {
                return Err(FeatureError::Split(
                    "training operating points must be a proper nonempty subset of the dataset's".into(),
                ));
            }
            (0..ds.len()).partition(|i| train_groups.contains(&ds.examples[*i].group))
        }
    };
    if train.is_empty() {
        return Err(FeatureError::EmptySide("train"));
    }
    if test.is_empty() {
        return Err(FeatureError::EmptySide("test"));
    }
    Ok((ds.subset(&train), ds.subset(&test)))
}

/// Keeps only the features of the PMUs in `subset`.
pub fn restrict_pmus(ds: &Dataset, subset: &[BusId]) -> Result<Dataset, FeatureError> {
    let wanted: BTreeSet<BusId> = subset.iter().copied().collect();
    if wanted.is_empty() {
        return Err(FeatureError::Placement("empty PMU subset".into()));
    }
    if let Some(b) = wanted.iter().find(|b| !ds.placement.buses.contains(b)) {
        return Err(FeatureError::UnknownBus(*b));
    }
    let keep: Vec<usize> = ds
        .placement
        .buses
        .iter()
        .enumerate()
        .filter(|(_, b)| wanted.contains(b))
        .map(|(i, _)| i)
        .collect();
    let placement = PmuPlacement {
        buses: keep.iter().map(|i| ds.placement.buses[*i]).collect(),
        adjacent: keep.iter().map(|i| ds.placement.adjacent[*i]).collect(),
    };
    let examples = ds
        .examples
        .iter()
        .map(|e| LabeledExample {
            features: keep
                .iter()
                .flat_map(|i| [e.features[2 * i], e.features[2 * i + 1]])
                .collect(),
            ..e.clone()
        })
        .collect();
    Ok(Dataset {
        examples,
        placement,
        case_fingerprint: ds.case_fingerprint.clone(),
    })
}

/// Recall of the stable class and of the unstable class.
pub fn per_class_accuracy(
    predictions: &[StabilityLabel],
    labels: &[StabilityLabel],
) -> Result<(f64, f64), FeatureError> {
    if predictions.len() != labels.len() {
        return Err(FeatureError::Metric(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let recall = |class: StabilityLabel| -> Result<f64, FeatureError> {
        let (mut hit, mut total) = (0usize, 0usize);
        for (p, l) in predictions.iter().zip(labels) {
            if *l == class {
                total += 1;
                hit += usize::from(p == l);
            }
        }
        if total == 0 {
            return Err(FeatureError::Metric(format!("no {class} examples: per-class accuracy undefined")));
        }
        Ok(hit as f64 / total as f64)
    };
    Ok((recall(StabilityLabel::Stable)?, recall(StabilityLabel::Unstable)?))
}
