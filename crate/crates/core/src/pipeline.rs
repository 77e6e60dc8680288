//! End-to-end experiments: generate, simulate, extract, split,
//! cross-validate, train, evaluate and report.
//!
//! Every stage writes its artifact under `<output_dir>/artifacts`, named by a
//! hash of the stage's own settings and the hashes of the stages it consumes.
//! A rerun reuses any artifact whose name already exists, so deleting a
//! downstream file recomputes only that stage and what follows it.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynsim::{
    drive, EventSchedule, RelayConfig, SimError, SimOptions, SimOutcome, Simulator, StabilityLabel,
    UnstableReason, FLAT_START_SECONDS,
};
use crate::featureset::{
    extract_example, per_class_accuracy, restrict_pmus, snapshot_time, split, Dataset, FeatureError,
    LabeledExample, PmuPlacement, SplitSpec,
};
use crate::netcase::{load_case, BusId, CaseError, NetworkCase};
use crate::scenario::{
    generate_scenarios, DiversificationConfig, IcId, InitialCondition, ScenarioError, ScenarioManifest,
    ScenarioSet,
};
use crate::svm::{cross_validate_dataset, oversample, train_dataset, CvResult, KernelSpec, SvmError, SvmModel, TrainConfig};

/// Case path that selects the bundled two-area case.
pub const BUILTIN_TWOAREA: &str = "builtin:twoarea";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Config,
    Generate,
    Simulate,
    Split,
    CrossValidate,
    Train,
    Evaluate,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Generate => "generate",
            Stage::Simulate => "simulate",
            Stage::Split => "split",
            Stage::CrossValidate => "cross-validate",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StageError {
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Svm(#[from] SvmError),
    #[error("{0}")]
    Invalid(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, thiserror::Error)]
#[error("{stage} stage failed: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: StageError,
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T, E: Into<StageError>> AtStage<T> for Result<T, E> {
    fn at(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError {
            stage,
            source: e.into(),
        })
    }
}

fn invalid(stage: Stage, msg: impl Into<String>) -> PipelineError {
    PipelineError {
        stage,
        source: StageError::Invalid(msg.into()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub island_time: f64,
    /// One simulation per initial condition and reconnection time.
    pub reconnect_times: Vec<f64>,
    pub end_time: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            island_time: 5.0,
            reconnect_times: vec![45.0],
            end_time: 120.0,
        }
    }
}

impl ScheduleConfig {
    pub fn schedules(&self) -> Vec<EventSchedule> {
        self.reconnect_times
            .iter()
            .map(|tr| EventSchedule::new(self.island_time, *tr, self.end_time))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RelaySpec {
    /// The standard relay tables with generator dials drawn from `seed`.
    Standard { seed: u64 },
    None,
}

impl Default for RelaySpec {
    fn default() -> Self {
        RelaySpec::Standard { seed: 0 }
    }
}

impl RelaySpec {
    pub fn build(&self, case: &NetworkCase) -> RelayConfig {
        match self {
            RelaySpec::Standard { seed } => RelayConfig::standard(case, *seed),
            RelaySpec::None => RelayConfig::none(),
        }
    }
}

/// `"all"`, `"pcc"` (PCC buses and their neighbours) or an explicit bus list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PlacementSpec {
    Named(String),
    Buses(Vec<BusId>),
}

impl Default for PlacementSpec {
    fn default() -> Self {
        PlacementSpec::Named("all".into())
    }
}

impl PlacementSpec {
    pub fn build(&self, case: &NetworkCase) -> Result<PmuPlacement, FeatureError> {
        match self {
            PlacementSpec::Named(n) if n == "all" => Ok(PmuPlacement::all(case)),
            PlacementSpec::Named(n) if n == "pcc" => PmuPlacement::adjacent_to_pcc(case),
            PlacementSpec::Named(n) => Err(FeatureError::Placement(format!(
                "unknown placement `{n}` (expected \"all\", \"pcc\" or a bus list)"
            ))),
            PlacementSpec::Buses(b) => PmuPlacement::new(case, b.iter().copied()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub folds: usize,
    pub seed: u64,
    pub gammas: Vec<f64>,
    pub cs: Vec<f64>,
    /// Use a linear kernel instead of the RBF gamma grid.
    pub linear: bool,
    pub scale: bool,
    pub tolerance: f64,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            folds: 10,
            seed: 0,
            gammas: vec![1e-6, 1e-5, 1e-4],
            cs: vec![0.1, 1.0, 10.0, 100.0],
            linear: false,
            scale: false,
            tolerance: 1e-3,
        }
    }
}

impl CvConfig {
    pub fn grid(&self) -> Vec<TrainConfig> {
        let kernels: Vec<KernelSpec> = if self.linear {
            vec![KernelSpec::Linear]
        } else {
            self.gammas.iter().map(|g| KernelSpec::Rbf { gamma: *g }).collect()
        };
        let mut grid = Vec::new();
        for kernel in kernels {
            for c in &self.cs {
                grid.push(TrainConfig {
                    tolerance: self.tolerance,
                    scale: self.scale,
                    ..TrainConfig::new(kernel, *c)
                });
            }
        }
        grid
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    /// Case file path, or [`BUILTIN_TWOAREA`].
    pub case: String,
    pub output_dir: PathBuf,
    pub operating_points: usize,
    /// Initial conditions per operating point.
    pub initial_conditions: usize,
    #[serde(default)]
    pub diversification: DiversificationConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub relays: RelaySpec,
    #[serde(default)]
    pub sim: SimOptions,
    #[serde(default)]
    pub placement: PlacementSpec,
    pub split: SplitSpec,
    #[serde(default)]
    pub cv: CvConfig,
    #[serde(default)]
    pub oversample_seed: u64,
}

impl ExperimentConfig {
    /// The desk-scale two-area experiment: 9 operating points of 40 initial
    /// conditions, a 50/50 split of every operating point and 10-fold CV over
    /// the RBF grid on raw features.
    pub fn desk_scale(output_dir: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            name: "twoarea-desk".into(),
            case: BUILTIN_TWOAREA.into(),
            output_dir: output_dir.into(),
            operating_points: 9,
            initial_conditions: 40,
            diversification: DiversificationConfig {
                seed: 7,
                ..Default::default()
            },
            schedule: ScheduleConfig::default(),
            relays: RelaySpec::Standard { seed: 7 },
            sim: SimOptions::default(),
            placement: PlacementSpec::default(),
            split: SplitSpec {
                mode: crate::featureset::SplitMode::MultiOp { train_fraction: 0.5 },
                seed: 11,
            },
            cv: CvConfig {
                seed: 13,
                ..Default::default()
            },
            oversample_seed: 17,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| invalid(Stage::Config, e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String, PipelineError> {
        toml::to_string(self).map_err(|e| invalid(Stage::Config, e.to_string()))
    }

    /// Reads a config file; relative case and output paths are taken relative
    /// to the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| StageError::Io {
                path: path.display().to_string(),
                source,
            })
            .at(Stage::Config)?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.case != BUILTIN_TWOAREA && Path::new(&cfg.case).is_relative() {
            cfg.case = base.join(&cfg.case).display().to_string();
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(invalid(Stage::Config, m));
        if self.operating_points == 0 || self.initial_conditions == 0 {
            return bad("operating point and initial condition counts must be at least 1".into());
        }
        if self.schedule.reconnect_times.is_empty() {
            return bad("at least one reconnection time is required".into());
        }
        for s in self.schedule.schedules() {
            s.validate().at(Stage::Config)?;
        }
        self.sim.sample_every().at(Stage::Config)?;
        self.diversification.validate().at(Stage::Config)?;
        if self.cv.folds < 2 {
            return bad(format!("{} folds: need at least 2", self.cv.folds));
        }
        if self.cv.cs.is_empty() || (!self.cv.linear && self.cv.gammas.is_empty()) {
            return bad("empty hyperparameter grid".into());
        }
        for t in self.cv.grid() {
            t.validate().at(Stage::Config)?;
        }
        if self.case != BUILTIN_TWOAREA && !Path::new(&self.case).is_file() {
            return bad(format!("case file {} does not exist", self.case));
        }
        Ok(())
    }

    pub fn load_case(&self) -> Result<NetworkCase, PipelineError> {
        if self.case == BUILTIN_TWOAREA {
            Ok(crate::twoarea_case())
        } else {
            load_case(&self.case).at(Stage::Config)
        }
    }
}

/// Recall pair; either side may be undefined when the class is absent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub stable: Option<f64>,
    pub unstable: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: u32,
    pub n_stable: usize,
    pub n_unstable: usize,
    pub accuracy: ClassAccuracy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub overall_stable: f64,
    pub overall_unstable: f64,
    pub groups: Vec<GroupRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub stable: usize,
    pub unstable: usize,
}

impl ClassCounts {
    fn of(ds: &Dataset) -> Self {
        let (stable, unstable) = ds.class_counts();
        ClassCounts { stable, unstable }
    }

    pub fn total(&self) -> usize {
        self.stable + self.unstable
    }

    /// Accuracy of always answering the larger class.
    pub fn majority_fraction(&self) -> f64 {
        self.stable.max(self.unstable) as f64 / self.total() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub case_fingerprint: String,
    pub pmus: Vec<BusId>,
    pub all: ClassCounts,
    pub train: ClassCounts,
    pub test: ClassCounts,
    /// Unstable labels by reason over the whole dataset.
    pub reasons: BTreeMap<String, usize>,
    pub chosen: TrainConfig,
    pub cv_score: f64,
    pub support_vectors: usize,
    pub evaluation: Evaluation,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub artifact: String,
    pub cached: bool,
    pub seconds: f64,
}

/// Wall-clock facts about a run. Kept apart from the report so the report
/// depends only on the configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub stages: Vec<StageTiming>,
    pub simulations: usize,
    pub total_seconds: f64,
}

impl RunStats {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.stages {
            let _ = writeln!(
                s,
                "{:<16} {:>9.3} s  {}  {}",
                t.stage,
                t.seconds,
                if t.cached { "cached" } else { "built " },
                t.artifact
            );
        }
        let _ = writeln!(s, "simulations {}", self.simulations);
        let _ = writeln!(s, "total {:.3} s", self.total_seconds);
        s
    }
}

/// One row per labeled run, kept next to the dataset for inspection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLabel {
    pub ic: IcId,
    pub reconnect_time: f64,
    pub label: StabilityLabel,
    pub reason: Option<UnstableReason>,
    pub time: Option<f64>,
    pub in_service_fraction: f64,
}

fn hash_parts(stage: &str, parts: &[&str]) -> String {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    for p in parts {
        h.update([0u8]);
        h.update(p.as_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

fn json<T: Serialize + ?Sized>(v: &T) -> String {
    serde_json::to_string(v).expect("config types serialize")
}

fn io_err(path: &Path, source: std::io::Error) -> StageError {
    StageError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes through a temporary name so an interrupted run never leaves a
/// truncated artifact behind under its final name.
fn write_atomic(path: &Path, contents: &str) -> Result<(), StageError> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, contents).map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn read(path: &Path) -> Result<String, StageError> {
    std::fs::read_to_string(path).map_err(|e| io_err(path, e))
}

/// Simulates one initial condition at every reconnection time. The shared
/// pre-reconnection part is stepped once and cloned at each reconnection.
pub fn simulate_variants(
    base: &NetworkCase,
    ic: &InitialCondition,
    schedules: &[EventSchedule],
    relays: &RelayConfig,
    opts: &SimOptions,
) -> Result<Vec<SimOutcome>, SimError> {
    let Some(first) = schedules.first() else {
        return Ok(vec![]);
    };
    for s in schedules {
        s.validate()?;
        if s.island_time != first.island_time || s.end_time != first.end_time {
            return Err(SimError::Schedule("variants may differ only in reconnection time".into()));
        }
    }
    let mut sim = Simulator::for_condition(base, ic, relays, opts)?;
    if opts.flat_start_check {
        let window = first
            .island_time
            .unwrap_or(first.end_time)
            .min(FLAT_START_SECONDS);
        sim.check_flat_start(window)?;
    }
    let mut order: Vec<usize> = (0..schedules.len()).collect();
    order.sort_by(|a, b| {
        let key = |s: &EventSchedule| s.reconnect_time.unwrap_or(f64::INFINITY);
        key(&schedules[*a]).total_cmp(&key(&schedules[*b]))
    });
    let island = first.island_time.map(|t| opts.step_of(t));
    let mut out: Vec<Option<SimOutcome>> = vec![None; schedules.len()];
    for i in order {
        let s = &schedules[i];
        let stop = s.reconnect_time.map_or(0, |t| opts.step_of(t));
        while sim.step_index() < stop && !sim.diverged() {
            if Some(sim.step_index()) == island {
                sim.open_ties();
            }
            sim.advance();
        }
        out[i] = Some(drive(sim.clone(), s)?);
    }
    Ok(out.into_iter().map(|o| o.expect("every variant simulated")).collect())
}

/// Simulates every initial condition in parallel and extracts one example per
/// run. Results are in initial-condition order regardless of scheduling.
pub fn simulate_dataset(
    case: &NetworkCase,
    set: &ScenarioSet,
    schedule: &ScheduleConfig,
    relays: &RelayConfig,
    opts: &SimOptions,
    placement: &PmuPlacement,
) -> Result<(Dataset, Vec<RunLabel>), StageError> {
    let schedules = schedule.schedules();
    let per_ic: Vec<Result<Vec<(LabeledExample, RunLabel)>, StageError>> = set
        .initial_conditions
        .par_iter()
        .map(|ic| {
            let outcomes = simulate_variants(case, ic, &schedules, relays, opts)?;
            outcomes
                .iter()
                .map(|o| {
                    let tr = o.schedule.reconnect_time.expect("reconnect scheduled");
                    let ex = extract_example(o, placement, snapshot_time(tr, opts.sample_period), ic.id)?;
                    let row = RunLabel {
                        ic: ic.id,
                        reconnect_time: tr,
                        label: o.label.label,
                        reason: o.label.reason,
                        time: o.label.time,
                        in_service_fraction: o.label.in_service_fraction,
                    };
                    Ok((ex, row))
                })
                .collect()
        })
        .collect();
    let mut ds = Dataset::new(placement.clone(), case.fingerprint());
    let mut labels = Vec::new();
    for r in per_ic {
        for (ex, row) in r? {
            ds.examples.push(ex);
            labels.push(row);
        }
    }
    Ok((ds, labels))
}

/// One CSV row per labeled run.
pub fn labels_csv(rows: &[RunLabel]) -> String {
    let mut s = String::from("ic,reconnect_time,label,reason,time,in_service_fraction\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.ic,
            r.reconnect_time,
            r.label,
            r.reason.map(|x| x.to_string()).unwrap_or_default(),
            r.time.map(|x| x.to_string()).unwrap_or_default(),
            r.in_service_fraction
        );
    }
    s
}

pub fn evaluate(model: &SvmModel, test: &Dataset) -> Result<Evaluation, StageError> {
    let pred = model.predict_dataset(test)?;
    let truth = test.labels();
    let (overall_stable, overall_unstable) = per_class_accuracy(&pred, &truth)?;
    let mut groups = Vec::new();
    for g in test.groups() {
        let mut hit = [0usize; 2];
        let mut n = [0usize; 2];
        for (i, e) in test.examples.iter().enumerate().filter(|(_, e)| e.group == g) {
            let c = usize::from(e.label == StabilityLabel::Unstable);
            n[c] += 1;
            hit[c] += usize::from(pred[i] == e.label);
        }
        let rate = |c: usize| (n[c] > 0).then(|| hit[c] as f64 / n[c] as f64);
        groups.push(GroupRow {
            group: g,
            n_stable: n[0],
            n_unstable: n[1],
            accuracy: ClassAccuracy {
                stable: rate(0),
                unstable: rate(1),
            },
        });
    }
    Ok(Evaluation {
        overall_stable,
        overall_unstable,
        groups,
    })
}

fn pct(x: Option<f64>) -> String {
    x.map(|v| format!("{:.1}", 100.0 * v)).unwrap_or_else(|| "-".into())
}

fn frac(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

fn kernel_text(k: &KernelSpec) -> String {
    match k {
        KernelSpec::Rbf { gamma } => format!("rbf gamma={gamma:e}"),
        KernelSpec::Linear => "linear".into(),
    }
}

impl ExperimentReport {
    /// Table with one row per test operating point and a total row.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "experiment  {}", self.name);
        let _ = writeln!(s, "case        {}", self.case_fingerprint);
        let pmus: Vec<String> = self.pmus.iter().map(|b| b.to_string()).collect();
        let _ = writeln!(s, "pmus        {}", pmus.join(" "));
        for (name, c) in [("dataset", &self.all), ("train", &self.train), ("test", &self.test)] {
            let _ = writeln!(s, "{name:<11} {} examples, {} stable, {} unstable", c.total(), c.stable, c.unstable);
        }
        let reasons: Vec<String> = self.reasons.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(s, "unstable    {}", if reasons.is_empty() { "-".into() } else { reasons.join(" ") });
        let _ = writeln!(
            s,
            "chosen      {} C={} scale={} (cv balanced accuracy {:.4})",
            kernel_text(&self.chosen.kernel),
            self.chosen.c,
            self.chosen.scale,
            self.cv_score
        );
        let _ = writeln!(s, "model       {} support vectors", self.support_vectors);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<8} {:>8} {:>10} {:>10} {:>12}", "op", "stable", "unstable", "stable %", "unstable %");
        for g in &self.evaluation.groups {
            let _ = writeln!(
                s,
                "{:<8} {:>8} {:>10} {:>10} {:>12}",
                g.group,
                g.n_stable,
                g.n_unstable,
                pct(g.accuracy.stable),
                pct(g.accuracy.unstable)
            );
        }
        let _ = writeln!(
            s,
            "{:<8} {:>8} {:>10} {:>10} {:>12}",
            "all",
            self.test.stable,
            self.test.unstable,
            pct(Some(self.evaluation.overall_stable)),
            pct(Some(self.evaluation.overall_unstable))
        );
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("op,n_stable,n_unstable,stable_accuracy,unstable_accuracy\n");
        for g in &self.evaluation.groups {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                g.group,
                g.n_stable,
                g.n_unstable,
                frac(g.accuracy.stable),
                frac(g.accuracy.unstable)
            );
        }
        let _ = writeln!(
            s,
            "all,{},{},{},{}",
            self.test.stable,
            self.test.unstable,
            frac(Some(self.evaluation.overall_stable)),
            frac(Some(self.evaluation.overall_unstable))
        );
        s
    }
}

/// Artifacts of a finished run.
#[derive(Clone, Debug)]
pub struct ExperimentRun {
    pub report: ExperimentReport,
    pub stats: RunStats,
    pub dataset: Dataset,
    pub train: Dataset,
    pub test: Dataset,
    pub model: SvmModel,
    pub artifacts: PathBuf,
}

struct Cache {
    dir: PathBuf,
    stats: RunStats,
}

impl Cache {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn record(&mut self, stage: Stage, artifact: &str, cached: bool, started: Instant) {
        self.stats.stages.push(StageTiming {
            stage: stage.to_string(),
            artifact: artifact.into(),
            cached,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
}

struct Prepared {
    case: NetworkCase,
    dataset: Dataset,
    train: Dataset,
    test: Dataset,
    split_hash: String,
    labels: Vec<RunLabel>,
}

fn prepare(cfg: &ExperimentConfig, cache: &mut Cache) -> Result<Prepared, PipelineError> {
    cfg.validate()?;
    let case = cfg.load_case()?;
    let placement = cfg.placement.build(&case).at(Stage::Config)?;

    let t = Instant::now();
    let gen_hash = hash_parts(
        "generate",
        &[&case.fingerprint(), &json(&cfg.diversification), &cfg.operating_points.to_string(), &cfg.initial_conditions.to_string()],
    );
    let manifest_name = format!("scenarios-{gen_hash}.json");
    let manifest_path = cache.path(&manifest_name);
    let (set, cached) = if manifest_path.is_file() {
        let m = ScenarioManifest::load(&manifest_path).at(Stage::Generate)?;
        (m.rebuild(&case).at(Stage::Generate)?, true)
    } else {
        let set = generate_scenarios(&case, &cfg.diversification, cfg.operating_points, cfg.initial_conditions)
            .at(Stage::Generate)?;
        set.manifest.save(&manifest_path).at(Stage::Generate)?;
        (set, false)
    };
    cache.record(Stage::Generate, &manifest_name, cached, t);

    let t = Instant::now();
    let relays = cfg.relays.build(&case);
    let sim_hash = hash_parts(
        "simulate",
        &[&gen_hash, &json(&cfg.schedule), &json(&relays), &json(&cfg.sim), &json(&placement)],
    );
    let ds_name = format!("dataset-{sim_hash}.ds");
    let labels_name = format!("labels-{sim_hash}.json");
    let (ds_path, labels_path) = (cache.path(&ds_name), cache.path(&labels_name));
    let (dataset, labels, cached) = if ds_path.is_file() && labels_path.is_file() {
        let ds = Dataset::load(&ds_path).at(Stage::Simulate)?;
        let labels: Vec<RunLabel> = serde_json::from_str(&read(&labels_path).at(Stage::Simulate)?)
            .map_err(|e| invalid(Stage::Simulate, format!("{}: {e}", labels_path.display())))?;
        (ds, labels, true)
    } else {
        let (ds, labels) =
            simulate_dataset(&case, &set, &cfg.schedule, &relays, &cfg.sim, &placement).at(Stage::Simulate)?;
        cache.stats.simulations = labels.len();
        write_atomic(&labels_path, &(serde_json::to_string_pretty(&labels).expect("labels serialize") + "\n"))
            .at(Stage::Simulate)?;
        write_atomic(&cache.path(&format!("labels-{sim_hash}.csv")), &labels_csv(&labels)).at(Stage::Simulate)?;
        write_atomic(&ds_path, &ds.to_text()).at(Stage::Simulate)?;
        (ds, labels, false)
    };
    cache.record(Stage::Simulate, &ds_name, cached, t);

    let t = Instant::now();
    let split_hash = hash_parts("split", &[&sim_hash, &json(&cfg.split)]);
    let train_path = cache.path(&format!("train-{split_hash}.ds"));
    let test_path = cache.path(&format!("test-{split_hash}.ds"));
    let (train, test, cached) = if train_path.is_file() && test_path.is_file() {
        (
            Dataset::load(&train_path).at(Stage::Split)?,
            Dataset::load(&test_path).at(Stage::Split)?,
            true,
        )
    } else {
        let (train, test) = split(&dataset, &cfg.split).at(Stage::Split)?;
        write_atomic(&train_path, &train.to_text()).at(Stage::Split)?;
        write_atomic(&test_path, &test.to_text()).at(Stage::Split)?;
        (train, test, false)
    };
    cache.record(Stage::Split, &format!("train/test-{split_hash}.ds"), cached, t);

    Ok(Prepared {
        case,
        dataset,
        train,
        test,
        split_hash,
        labels,
    })
}

/// Cross-validates, trains and evaluates on an already split dataset.
/// Cross-validates the grid of `cv` on `train`, then fits the chosen
/// configuration on the oversampled training set.
pub fn select_and_train(train: &Dataset, cv: &CvConfig, oversample_seed: u64) -> Result<(CvResult, SvmModel), PipelineError> {
    let result = cross_validate_dataset(train, &cv.grid(), cv.folds, cv.seed).at(Stage::CrossValidate)?;
    let balanced = oversample(train, oversample_seed).at(Stage::Train)?;
    let model = train_dataset(&balanced, &result.best).at(Stage::Train)?;
    Ok((result, model))
}

fn fit(
    cfg: &ExperimentConfig,
    cache: &mut Cache,
    train: &Dataset,
    test: &Dataset,
    upstream: &str,
) -> Result<(CvResult, SvmModel, Evaluation), PipelineError> {
    let t = Instant::now();
    let grid = cfg.cv.grid();
    let cv_hash = hash_parts(
        "cv",
        &[upstream, &json(&grid), &cfg.cv.folds.to_string(), &cfg.cv.seed.to_string()],
    );
    let cv_name = format!("cv-{cv_hash}.json");
    let cv_path = cache.path(&cv_name);
    let cached = cv_path.is_file();
    let cv: CvResult = if cached {
        serde_json::from_str(&read(&cv_path).at(Stage::CrossValidate)?)
            .map_err(|e| invalid(Stage::CrossValidate, format!("{}: {e}", cv_path.display())))?
    } else {
        let cv = cross_validate_dataset(train, &grid, cfg.cv.folds, cfg.cv.seed).at(Stage::CrossValidate)?;
        write_atomic(&cv_path, &(serde_json::to_string_pretty(&cv).expect("cv serializes") + "\n"))
            .at(Stage::CrossValidate)?;
        cv
    };
    cache.record(Stage::CrossValidate, &cv_name, cached, t);

    let t = Instant::now();
    let model_hash = hash_parts("train", &[&cv_hash, &cfg.oversample_seed.to_string()]);
    let model_name = format!("model-{model_hash}.svm");
    let model_path = cache.path(&model_name);
    let cached = model_path.is_file();
    let model = if cached {
        SvmModel::load(&model_path).at(Stage::Train)?
    } else {
        let balanced = oversample(train, cfg.oversample_seed).at(Stage::Train)?;
        let model = train_dataset(&balanced, &cv.best).at(Stage::Train)?;
        write_atomic(&model_path, &model.to_text()).at(Stage::Train)?;
        model
    };
    cache.record(Stage::Train, &model_name, cached, t);

    let t = Instant::now();
    let evaluation = evaluate(&model, test).at(Stage::Evaluate)?;
    cache.record(Stage::Evaluate, "-", false, t);
    Ok((cv, model, evaluation))
}

fn open_cache(cfg: &ExperimentConfig) -> Result<Cache, PipelineError> {
    let dir = cfg.output_dir.join("artifacts");
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e)).at(Stage::Config)?;
    Ok(Cache {
        dir,
        stats: RunStats::default(),
    })
}

fn reason_counts(labels: &[RunLabel]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for r in labels {
        if let Some(reason) = r.reason {
            *m.entry(reason.to_string()).or_insert(0) += 1;
        }
    }
    m
}

/// Mean fold score of the chosen configuration.
pub fn cv_score(cv: &CvResult) -> f64 {
    cv.rows
        .iter()
        .find(|r| r.config == cv.best)
        .map(|r| r.mean)
        .unwrap_or(f64::NAN)
}

/// Runs every stage and writes `report.txt`, `report.csv`, `report.json`,
/// `timings.txt` and the config used into the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentRun, PipelineError> {
    let started = Instant::now();
    let mut cache = open_cache(cfg)?;
    let p = prepare(cfg, &mut cache)?;
    let (cv, model, evaluation) = fit(cfg, &mut cache, &p.train, &p.test, &p.split_hash)?;

    let t = Instant::now();
    let report = ExperimentReport {
        name: cfg.name.clone(),
        case_fingerprint: p.case.fingerprint(),
        pmus: p.dataset.placement.buses().to_vec(),
        all: ClassCounts::of(&p.dataset),
        train: ClassCounts::of(&p.train),
        test: ClassCounts::of(&p.test),
        reasons: reason_counts(&p.labels),
        chosen: cv.best.clone(),
        cv_score: cv_score(&cv),
        support_vectors: model.support_vectors.len(),
        evaluation,
    };
    let out = &cfg.output_dir;
    let w = |name: &str, text: &str| write_atomic(&out.join(name), text).at(Stage::Report);
    w("report.txt", &report.to_text())?;
    w("report.csv", &report.to_csv())?;
    w("report.json", &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"))?;
    w("experiment.toml", &cfg.to_toml()?)?;
    w("model.svm", &model.to_text())?;
    cache.record(Stage::Report, "report.txt", false, t);
    cache.stats.total_seconds = started.elapsed().as_secs_f64();
    w("timings.txt", &cache.stats.to_text())?;
    Ok(ExperimentRun {
        report,
        stats: cache.stats,
        dataset: p.dataset,
        train: p.train,
        test: p.test,
        model,
        artifacts: cache.dir,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub pmus: Vec<BusId>,
    pub chosen: TrainConfig,
    pub cv_score: f64,
    pub stable: f64,
    pub unstable: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub name: String,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "experiment  {}", self.name);
        let _ = writeln!(s, "{:<24} {:<20} {:>8} {:>10} {:>12}", "pmus", "kernel", "C", "stable %", "unstable %");
        for r in &self.rows {
            let pmus: Vec<String> = r.pmus.iter().map(|b| b.to_string()).collect();
            let _ = writeln!(
                s,
                "{:<24} {:<20} {:>8} {:>10} {:>12}",
                pmus.join(" "),
                kernel_text(&r.chosen.kernel),
                r.chosen.c,
                pct(Some(r.stable)),
                pct(Some(r.unstable))
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("pmus,kernel,c,cv_score,stable_accuracy,unstable_accuracy\n");
        for r in &self.rows {
            let pmus: Vec<String> = r.pmus.iter().map(|b| b.to_string()).collect();
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{:.6},{:.6}",
                pmus.join(" "),
                kernel_text(&r.chosen.kernel),
                r.chosen.c,
                r.cv_score,
                r.stable,
                r.unstable
            );
        }
        s
    }
}

/// Trains and evaluates one model per PMU subset on the experiment's split,
/// and writes `sweep.txt` and `sweep.csv` into the output directory.
pub fn trusted_subset_sweep(cfg: &ExperimentConfig, subsets: &[Vec<BusId>]) -> Result<SweepTable, PipelineError> {
    let mut cache = open_cache(cfg)?;
    let p = prepare(cfg, &mut cache)?;
    for s in subsets {
        if s.is_empty() {
            return Err(invalid(Stage::Config, "empty PMU subset"));
        }
        if let Some(b) = s.iter().find(|b| !p.dataset.placement.buses().contains(b)) {
            return Err(invalid(Stage::Config, format!("bus {b} is not in the experiment's PMU placement")));
        }
    }
    let mut rows = Vec::with_capacity(subsets.len());
    for s in subsets {
        let train = restrict_pmus(&p.train, s).at(Stage::Split)?;
        let test = restrict_pmus(&p.test, s).at(Stage::Split)?;
        // The full placement shares the baseline's artifacts.
        let upstream = if train.placement == p.train.placement {
            p.split_hash.clone()
        } else {
            hash_parts("restrict", &[&p.split_hash, &json(train.placement.buses())])
        };
        let (cv, _, ev) = fit(cfg, &mut cache, &train, &test, &upstream)?;
        rows.push(SweepRow {
            pmus: train.placement.buses().to_vec(),
            cv_score: cv_score(&cv),
            chosen: cv.best,
            stable: ev.overall_stable,
            unstable: ev.overall_unstable,
        });
    }
    let table = SweepTable {
        name: cfg.name.clone(),
        rows,
    };
    let out = &cfg.output_dir;
    write_atomic(&out.join("sweep.txt"), &table.to_text()).at(Stage::Report)?;
    write_atomic(&out.join("sweep.csv"), &table.to_csv()).at(Stage::Report)?;
    Ok(table)
}
