//! The `gridsync` command line. Each subcommand wraps one library stage so
//! its artifact can be inspected before the next stage consumes it.
//!
//! Flags shared by every subcommand:
//!
//! * `--config FILE` experiment TOML whose settings are the defaults for
//!   every subcommand (without it, the desk-scale experiment is the default);
//! * `--seed N` replaces every seed of that configuration;
//! * `--out PATH` where results go (a directory, or a file for `dataset`
//!   and `train`);
//! * `--jobs N` worker threads for parallel stages;
//! * `--json` print one JSON object on stdout instead of text.
//!
//! Usage errors exit with status 2, failures with status 1.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gridsync_core::dynsim::{run_simulation, write_events, EventSchedule};
use gridsync_core::featureset::{split, Dataset, SplitMode, SplitSpec};
use gridsync_core::netcase::{solve_power_flow, NetworkCase, SteadyState};
use gridsync_core::pipeline::{
    cv_score, evaluate, labels_csv, run_experiment, select_and_train, simulate_dataset, trusted_subset_sweep,
    ExperimentConfig, PlacementSpec, RelaySpec,
};
use gridsync_core::scenario::{generate_scenarios, IcId, InitialCondition, LoadProfile, ScenarioManifest, ScenarioSet};
use gridsync_core::svm::{KernelSpec, SvmModel};
use gridsync_live::server::{spawn_server, ServerState};
use gridsync_live::{parse_stream, Body, LiveConfig, SessionManager, SessionSpec, WireMessage};
use serde_json::{json, Value};

#[derive(Debug, Parser)]
#[command(name = "gridsync", version, about = "Learn and test reconnection stability of islanded sub-networks")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (TOML) supplying the defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Replaces every seed of the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, or output file for `dataset` and `train`.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Worker threads for parallel stages [default: available cores].
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    /// Print one JSON object on stdout.
    #[arg(long, global = true)]
    pub json: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse and validate a case, then solve its power flow.
    CaseCheck(CaseArgs),
    /// Generate operating points and initial conditions.
    Gen(GenArgs),
    /// Simulate one initial condition and write its trace, events and label.
    Simulate(SimulateArgs),
    /// Simulate every initial condition and write the labeled dataset.
    Dataset(DatasetArgs),
    /// Cross-validate the grid and train the final model.
    Train(TrainArgs),
    /// Per-class accuracies of a model on a dataset.
    Evaluate(EvaluateArgs),
    /// Run the whole experiment of the config and write its report.
    Run,
    /// Retrain and evaluate on PMU subsets of the experiment's split.
    Sweep(SweepArgs),
    /// Serve live sessions over NDJSON/TCP and WebSocket.
    Serve(ServeArgs),
    /// Check a recorded session stream and print its verdict history.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct CaseArgs {
    /// Case file, or `builtin:twoarea`.
    #[arg(long)]
    pub case: Option<String>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub case: CaseArgs,
    /// Operating points.
    #[arg(long)]
    pub ops: Option<usize>,
    /// Initial conditions per operating point.
    #[arg(long)]
    pub ics: Option<usize>,
    /// Lower scaling bound: factors are drawn from [-a, b].
    #[arg(long)]
    pub a: Option<f64>,
    #[arg(long)]
    pub b: Option<f64>,
    /// Keep loads at their buses.
    #[arg(long)]
    pub no_shuffle: bool,
    /// Accepted voltage band, `LO,HI` in p.u.
    #[arg(long, value_name = "LO,HI")]
    pub band: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Relays {
    Standard,
    None,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    /// Islanding time, s.
    #[arg(long)]
    pub island: Option<f64>,
    /// End of the simulation, s.
    #[arg(long)]
    pub end: Option<f64>,
    /// Relay protection.
    #[arg(long, value_enum)]
    pub relays: Option<Relays>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub case: CaseArgs,
    /// Manifest written by `gen`.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Initial condition id, `OP.INDEX`.
    #[arg(long)]
    pub ic: String,
    /// Reconnection time, s.
    #[arg(long, conflicts_with = "no_reconnect")]
    pub reconnect: Option<f64>,
    /// Stay islanded until the end.
    #[arg(long)]
    pub no_reconnect: bool,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    #[command(flatten)]
    pub case: CaseArgs,
    /// Manifest written by `gen`; without it the config's scenarios are generated.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// PMU placement: `all`, `pcc` or a bus list such as `6,8`.
    #[arg(long)]
    pub pmus: Option<String>,
    /// Reconnection times, s; one example per time and initial condition.
    #[arg(long, value_delimiter = ',')]
    pub reconnect: Vec<f64>,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    /// Also split: `multi:FRACTION`, `single:OP:FRACTION` or `unseen:OP,OP,...`.
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// `default`, `linear`, or `gamma=G,G,...;c=C,C,...` (`linear;c=...`).
    #[arg(long)]
    pub grid: Option<String>,
    /// Cross-validation folds.
    #[arg(long)]
    pub k: Option<usize>,
    /// Standardize features before training.
    #[arg(long)]
    pub scale: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// PMU subsets separated by `;`, e.g. `6,8;7,9`.
    #[arg(long)]
    pub subsets: String,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub case: CaseArgs,
    /// Model for the verdict stream; without it sessions stream samples only.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 7878)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// PMU placement: `all`, `pcc` or a bus list.
    #[arg(long)]
    pub pmus: Option<String>,
    /// Conditions selectable by `start`; default is the case's own power flow.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Condition of the initial session.
    #[arg(long)]
    pub ic: Option<String>,
    /// Simulated seconds per wall-clock second; `inf` runs unpaced.
    #[arg(long, default_value_t = 1.0)]
    pub pacing: f64,
    /// Maximum concurrently running sessions.
    #[arg(long, default_value_t = 4)]
    pub limit: usize,
    /// Islanding time, s.
    #[arg(long)]
    pub island: Option<f64>,
    /// Simulated time kept after reconnection, s.
    #[arg(long)]
    pub post: Option<f64>,
    #[arg(long, value_enum)]
    pub relays: Option<Relays>,
    /// Do not start a session until a client asks.
    #[arg(long)]
    pub no_start: bool,
    /// Exit once the initial session has terminated.
    #[arg(long, conflicts_with = "no_start")]
    pub exit_after_session: bool,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Recorded NDJSON stream.
    #[arg(long)]
    pub stream: PathBuf,
    /// Recompute every verdict with this model.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

/// Parses `args` and runs the command; returns the process exit status.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", diagnostic(&e));
            ExitCode::FAILURE
        }
    }
}

/// The error chain joined by `: `, leaving out causes already quoted by the
/// message before them.
fn diagnostic(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.ends_with(&msg) {
            if !out.is_empty() {
                out += ": ";
            }
            out += &msg;
        }
    }
    out
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.common.jobs {
        if n == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let cfg = base_config(&cli.common)?;
    let ctx = Ctx {
        cfg,
        out: cli.common.out.clone(),
        json: cli.common.json,
    };
    match &cli.command {
        Command::CaseCheck(a) => case_check(&ctx, a),
        Command::Gen(a) => gen(&ctx, a),
        Command::Simulate(a) => simulate(&ctx, a),
        Command::Dataset(a) => dataset(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Evaluate(a) => evaluate_cmd(&ctx, a),
        Command::Run => run_cmd(&ctx),
        Command::Sweep(a) => sweep(&ctx, a),
        Command::Serve(a) => serve(&ctx, a),
        Command::Replay(a) => replay(&ctx, a),
    }
}

struct Ctx {
    cfg: ExperimentConfig,
    out: Option<PathBuf>,
    json: bool,
}

impl Ctx {
    fn emit(&self, value: Value, text: impl FnOnce() -> String) {
        if self.json {
            println!("{value}");
        } else {
            print!("{}", text());
        }
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    fn out_file(&self, default: &str) -> Result<PathBuf> {
        let path = self.out.clone().unwrap_or_else(|| PathBuf::from(default));
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        Ok(path)
    }

    fn case(&self, args: &CaseArgs) -> Result<NetworkCase> {
        let mut cfg = self.cfg.clone();
        if let Some(c) = &args.case {
            cfg.case = c.clone();
        }
        Ok(cfg.load_case()?)
    }

    fn relays(&self, r: Option<Relays>) -> RelaySpec {
        match r {
            None => self.cfg.relays.clone(),
            Some(Relays::None) => RelaySpec::None,
            Some(Relays::Standard) => match &self.cfg.relays {
                RelaySpec::Standard { seed } => RelaySpec::Standard { seed: *seed },
                RelaySpec::None => RelaySpec::Standard { seed: 0 },
            },
        }
    }
}

fn base_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::desk_scale("out"),
    };
    if let Some(s) = common.seed {
        cfg.diversification.seed = s;
        if let RelaySpec::Standard { seed } = &mut cfg.relays {
            *seed = s;
        }
        cfg.split.seed = s;
        cfg.cv.seed = s;
        cfg.oversample_seed = s;
    }
    Ok(cfg)
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|x| x.trim().parse().map_err(|_| anyhow!("bad {what} `{x}` in `{s}`")))
        .collect()
}

fn parse_placement(s: &str) -> Result<PlacementSpec> {
    match s {
        "all" | "pcc" => Ok(PlacementSpec::Named(s.into())),
        _ => Ok(PlacementSpec::Buses(parse_list(s, "bus id")?)),
    }
}

fn parse_split(s: &str) -> Result<SplitMode> {
    let fraction = |x: &str| -> Result<f64> { x.parse().map_err(|_| anyhow!("bad train fraction `{x}`")) };
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        ["multi", f] => Ok(SplitMode::MultiOp { train_fraction: fraction(f)? }),
        ["single", g, f] => Ok(SplitMode::SingleOp {
            group: g.parse().map_err(|_| anyhow!("bad operating point `{g}`"))?,
            train_fraction: fraction(f)?,
        }),
        ["unseen", g] => Ok(SplitMode::UnseenOp {
            train_groups: parse_list::<u32>(g, "operating point")?.into_iter().collect(),
        }),
        _ => bail!("bad split `{s}`: expected multi:F, single:OP:F or unseen:OP,OP,..."),
    }
}

fn apply_grid(s: &str, cv: &mut gridsync_core::pipeline::CvConfig) -> Result<()> {
    let defaults = gridsync_core::pipeline::CvConfig::default();
    match s {
        "default" => {
            cv.gammas = defaults.gammas;
            cv.cs = defaults.cs;
            cv.linear = false;
            return Ok(());
        }
        "linear" => {
            cv.cs = defaults.cs;
            cv.linear = true;
            return Ok(());
        }
        _ => {}
    }
    cv.linear = false;
    for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('=') {
            Some(("gamma", v)) => cv.gammas = parse_list(v, "gamma")?,
            Some(("c", v)) => cv.cs = parse_list(v, "C")?,
            None if part == "linear" => cv.linear = true,
            _ => bail!("bad grid term `{part}`: expected gamma=..., c=... or linear"),
        }
    }
    Ok(())
}

fn parse_subsets(s: &str) -> Result<Vec<Vec<u32>>> {
    s.split(';')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| parse_list(p, "bus id"))
        .collect()
}

fn vm_range(state: &SteadyState) -> (f64, f64) {
    state
        .vm
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)))
}

fn flow_summary(state: &SteadyState) -> Value {
    let (lo, hi) = vm_range(state);
    json!({
        "converged": state.converged,
        "iterations": state.iterations,
        "max_mismatch": state.max_mismatch,
        "vm_min": lo,
        "vm_max": hi,
    })
}

fn case_check(ctx: &Ctx, a: &CaseArgs) -> Result<()> {
    let case = ctx.case(a)?;
    case.validate()?;
    let full = solve_power_flow(&case, None)?;
    if !full.converged {
        bail!("power flow of {} did not converge", case.name);
    }
    let island = solve_power_flow(&case, Some(case.island_zone)).ok();
    let pccs: Vec<u32> = case.pcc_buses().into_iter().collect();
    let v = json!({
        "name": case.name,
        "fingerprint": case.fingerprint(),
        "buses": case.buses.len(),
        "branches": case.branches.len(),
        "generators": case.generators.len(),
        "loads": case.loads.len(),
        "tie_lines": case.tie_lines,
        "pcc_buses": pccs,
        "island_zone": case.island_zone,
        "power_flow": flow_summary(&full),
        "island_power_flow": island.as_ref().map(flow_summary),
    });
    ctx.emit(v, || {
        let mut s = format!(
            "case        {} ({})\nelements    {} buses, {} branches, {} generators, {} loads\n",
            case.name,
            case.fingerprint(),
            case.buses.len(),
            case.branches.len(),
            case.generators.len(),
            case.loads.len()
        );
        s += &format!("ties        {:?} (PCC buses {:?}), island zone {}\n", case.tie_lines, pccs, case.island_zone);
        let (lo, hi) = vm_range(&full);
        s += &format!(
            "power flow  converged in {} iterations, mismatch {:.2e}, |V| in [{lo:.4}, {hi:.4}]\n",
            full.iterations, full.max_mismatch
        );
        match &island {
            Some(st) if st.converged => s += &format!("island      converges alone in {} iterations\n", st.iterations),
            _ => s += "island      does not converge alone\n",
        }
        s
    });
    Ok(())
}

fn gen(ctx: &Ctx, a: &GenArgs) -> Result<()> {
    let case = ctx.case(&a.case)?;
    let mut div = ctx.cfg.diversification.clone();
    if let Some(x) = a.a {
        div.a = x;
    }
    if let Some(x) = a.b {
        div.b = x;
    }
    if a.no_shuffle {
        div.shuffle_loads = false;
    }
    if let Some(band) = &a.band {
        let v: Vec<f64> = parse_list(band, "voltage")?;
        let [lo, hi] = v[..] else {
            bail!("--band takes LO,HI");
        };
        div.voltage_band = (lo, hi);
    }
    let ops = a.ops.unwrap_or(ctx.cfg.operating_points);
    let ics = a.ics.unwrap_or(ctx.cfg.initial_conditions);
    let set = generate_scenarios(&case, &div, ops, ics)?;
    let dir = ctx.out_dir()?;
    let manifest = dir.join("manifest.json");
    let conditions = dir.join("conditions.json");
    set.manifest.save(&manifest)?;
    std::fs::write(&conditions, serde_json::to_string_pretty(&set.initial_conditions)? + "\n")
        .with_context(|| format!("writing {}", conditions.display()))?;
    let v = json!({
        "manifest": manifest,
        "conditions": conditions,
        "operating_points": set.operating_points.len(),
        "initial_conditions": set.initial_conditions.len(),
    });
    ctx.emit(v, || {
        format!(
            "{} operating points, {} initial conditions\nwrote {} and {}\n",
            set.operating_points.len(),
            set.initial_conditions.len(),
            manifest.display(),
            conditions.display()
        )
    });
    Ok(())
}

fn load_set(case: &NetworkCase, manifest: &Path) -> Result<ScenarioSet> {
    let m = ScenarioManifest::load(manifest).with_context(|| format!("reading {}", manifest.display()))?;
    Ok(m.rebuild(case)?)
}

fn find_ic<'a>(set: &'a [InitialCondition], id: &str) -> Result<&'a InitialCondition> {
    let id: IcId = id.parse().map_err(|e: String| anyhow!(e))?;
    set.iter()
        .find(|c| c.id == id)
        .ok_or_else(|| anyhow!("initial condition {id} is not in the manifest"))
}

fn simulate(ctx: &Ctx, a: &SimulateArgs) -> Result<()> {
    let case = ctx.case(&a.case)?;
    let set = load_set(&case, &a.manifest)?;
    let ic = find_ic(&set.initial_conditions, &a.ic)?;
    let s = &ctx.cfg.schedule;
    let island = a.schedule.island.unwrap_or(s.island_time);
    let end = a.schedule.end.unwrap_or(s.end_time);
    let schedule = if a.no_reconnect {
        EventSchedule::islanding_only(island, end)
    } else {
        let first = s.reconnect_times.first().copied().unwrap_or(end);
        EventSchedule::new(island, a.reconnect.unwrap_or(first), end)
    };
    let relays = ctx.relays(a.schedule.relays).build(&case);
    let out = run_simulation(&case, ic, &schedule, &relays, &ctx.cfg.sim)?;
    let dir = ctx.out_dir()?;
    let trace_path = dir.join("trace.txt");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&trace_path)?);
    out.trace.write_to(&mut f)?;
    f.flush()?;
    let events_path = dir.join("events.txt");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&events_path)?);
    write_events(&out.events, &mut f)?;
    f.flush()?;
    let outcome = json!({
        "ic": ic.id.to_string(),
        "schedule": out.schedule,
        "label": out.label,
        "events": out.events.len(),
        "trace_digest": out.trace.digest(),
    });
    let outcome_path = dir.join("outcome.json");
    std::fs::write(&outcome_path, serde_json::to_string_pretty(&outcome)? + "\n")?;
    ctx.emit(outcome, || {
        let reason = out.label.reason.map(|r| format!(" ({r} at {:.2} s)", out.label.time.unwrap_or(f64::NAN)));
        format!(
            "ic {}: {}{}, {} events, {:.1}% of buses in service\nwrote {}, {} and {}\n",
            ic.id,
            out.label.label,
            reason.unwrap_or_default(),
            out.events.len(),
            100.0 * out.label.in_service_fraction,
            trace_path.display(),
            events_path.display(),
            outcome_path.display()
        )
    });
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn dataset(ctx: &Ctx, a: &DatasetArgs) -> Result<()> {
    let case = ctx.case(&a.case)?;
    let cfg = &ctx.cfg;
    let set = match &a.manifest {
        Some(m) => load_set(&case, m)?,
        None => generate_scenarios(&case, &cfg.diversification, cfg.operating_points, cfg.initial_conditions)?,
    };
    let placement = match &a.pmus {
        Some(p) => parse_placement(p)?,
        None => cfg.placement.clone(),
    }
    .build(&case)?;
    let mut schedule = cfg.schedule.clone();
    if let Some(t) = a.schedule.island {
        schedule.island_time = t;
    }
    if let Some(t) = a.schedule.end {
        schedule.end_time = t;
    }
    if !a.reconnect.is_empty() {
        schedule.reconnect_times = a.reconnect.clone();
    }
    let relays = ctx.relays(a.schedule.relays).build(&case);
    let (ds, labels) = simulate_dataset(&case, &set, &schedule, &relays, &cfg.sim, &placement)?;
    let path = ctx.out_file("dataset.ds")?;
    ds.save(&path)?;
    let labels_path = sibling(&path, "labels.csv");
    std::fs::write(&labels_path, labels_csv(&labels))?;
    let (stable, unstable) = ds.class_counts();
    let mut v = json!({
        "dataset": path,
        "labels": labels_path,
        "examples": ds.len(),
        "stable": stable,
        "unstable": unstable,
        "pmus": placement.buses(),
    });
    let mut text = format!(
        "{} examples ({stable} stable, {unstable} unstable) on PMUs {:?}\nwrote {} and {}\n",
        ds.len(),
        placement.buses(),
        path.display(),
        labels_path.display()
    );
    if let Some(s) = &a.split {
        let spec = SplitSpec {
            mode: parse_split(s)?,
            seed: cfg.split.seed,
        };
        let (train, test) = split(&ds, &spec)?;
        let (tp, sp) = (sibling(&path, "train.ds"), sibling(&path, "test.ds"));
        train.save(&tp)?;
        test.save(&sp)?;
        v["train"] = json!({ "path": tp, "examples": train.len() });
        v["test"] = json!({ "path": sp, "examples": test.len() });
        text += &format!("split {} train / {} test: wrote {} and {}\n", train.len(), test.len(), tp.display(), sp.display());
    }
    ctx.emit(v, || text);
    Ok(())
}

fn kernel_name(k: &KernelSpec) -> String {
    match k {
        KernelSpec::Rbf { gamma } => format!("rbf gamma={gamma:e}"),
        KernelSpec::Linear => "linear".into(),
    }
}

fn train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let ds = Dataset::load(&a.dataset).with_context(|| format!("reading {}", a.dataset.display()))?;
    let mut cv = ctx.cfg.cv.clone();
    if let Some(g) = &a.grid {
        apply_grid(g, &mut cv)?;
    }
    if let Some(k) = a.k {
        cv.folds = k;
    }
    if a.scale {
        cv.scale = true;
    }
    let (result, model) = select_and_train(&ds, &cv, ctx.cfg.oversample_seed)?;
    let path = ctx.out_file("model.svm")?;
    model.save(&path)?;
    let score = cv_score(&result);
    let rows: Vec<Value> = result
        .rows
        .iter()
        .map(|r| json!({ "kernel": r.config.kernel, "c": r.config.c, "mean": r.mean, "fold_scores": r.fold_scores }))
        .collect();
    let v = json!({
        "model": path,
        "chosen": result.best,
        "cv_score": score,
        "support_vectors": model.support_vectors.len(),
        "grid": rows,
    });
    ctx.emit(v, || {
        let mut s = format!("{:<20} {:>8} {:>10}\n", "kernel", "C", "cv score");
        for r in &result.rows {
            s += &format!("{:<20} {:>8} {:>10.4}\n", kernel_name(&r.config.kernel), r.config.c, r.mean);
        }
        s += &format!(
            "chosen {} C={} (cv {:.4}), {} support vectors\nwrote {}\n",
            kernel_name(&result.best.kernel),
            result.best.c,
            score,
            model.support_vectors.len(),
            path.display()
        );
        s
    });
    Ok(())
}

fn pct(x: Option<f64>) -> String {
    x.map(|v| format!("{:.1}", 100.0 * v)).unwrap_or_else(|| "-".into())
}

fn evaluate_cmd(ctx: &Ctx, a: &EvaluateArgs) -> Result<()> {
    let model = SvmModel::load(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let ds = Dataset::load(&a.dataset).with_context(|| format!("reading {}", a.dataset.display()))?;
    let ev = evaluate(&model, &ds)?;
    ctx.emit(serde_json::to_value(&ev)?, || {
        let mut s = format!("{:<8} {:>8} {:>10} {:>10} {:>12}\n", "op", "stable", "unstable", "stable %", "unstable %");
        for g in &ev.groups {
            s += &format!(
                "{:<8} {:>8} {:>10} {:>10} {:>12}\n",
                g.group,
                g.n_stable,
                g.n_unstable,
                pct(g.accuracy.stable),
                pct(g.accuracy.unstable)
            );
        }
        let (n_s, n_u) = ds.class_counts();
        s += &format!(
            "{:<8} {:>8} {:>10} {:>10} {:>12}\n",
            "all",
            n_s,
            n_u,
            pct(Some(ev.overall_stable)),
            pct(Some(ev.overall_unstable))
        );
        s
    });
    Ok(())
}

fn experiment(ctx: &Ctx) -> ExperimentConfig {
    let mut cfg = ctx.cfg.clone();
    if let Some(o) = &ctx.out {
        cfg.output_dir = o.clone();
    }
    cfg
}

fn run_cmd(ctx: &Ctx) -> Result<()> {
    let cfg = experiment(ctx);
    let run = run_experiment(&cfg)?;
    eprint!("{}", run.stats.to_text());
    ctx.emit(serde_json::to_value(&run.report)?, || {
        format!("{}wrote {}\n", run.report.to_text(), cfg.output_dir.join("report.txt").display())
    });
    Ok(())
}

fn sweep(ctx: &Ctx, a: &SweepArgs) -> Result<()> {
    let cfg = experiment(ctx);
    let table = trusted_subset_sweep(&cfg, &parse_subsets(&a.subsets)?)?;
    ctx.emit(serde_json::to_value(&table)?, || {
        format!("{}wrote {}\n", table.to_text(), cfg.output_dir.join("sweep.txt").display())
    });
    Ok(())
}

fn serve(ctx: &Ctx, a: &ServeArgs) -> Result<()> {
    let case = ctx.case(&a.case)?;
    let model = match &a.model {
        Some(p) => Some(Arc::new(
            SvmModel::load(p).with_context(|| format!("reading {}", p.display()))?,
        )),
        None => None,
    };
    let placement = match &a.pmus {
        Some(p) => parse_placement(p)?,
        None => ctx.cfg.placement.clone(),
    }
    .build(&case)?;
    let conditions = match &a.manifest {
        Some(m) => load_set(&case, m)?.initial_conditions,
        None => {
            let steady_state = solve_power_flow(&case, None)?;
            vec![InitialCondition {
                id: IcId { op: 0, index: 0 },
                operating_point_id: 0,
                load_profile: LoadProfile::from_case(&case),
                steady_state,
            }]
        }
    };
    let ic = match &a.ic {
        Some(id) => find_ic(&conditions, id)?.clone(),
        None => conditions.first().cloned().ok_or_else(|| anyhow!("no initial conditions"))?,
    };
    let s = &ctx.cfg.schedule;
    let first = s.reconnect_times.first().copied().unwrap_or(s.end_time);
    let mut live = LiveConfig::from_schedule(&EventSchedule::new(s.island_time, first, s.end_time), a.pacing);
    if let Some(t) = a.island {
        live.island_time = t;
    }
    if let Some(t) = a.post {
        live.post_reconnect = t;
    }
    live.validate()?;
    let template = SessionSpec {
        relays: ctx.relays(a.relays).build(&case),
        case,
        ic,
        opts: ctx.cfg.sim.clone(),
        placement,
        model,
    };
    let state = Arc::new(ServerState::new(SessionManager::new(a.limit), template, conditions, live));
    let initial = if a.no_start {
        None
    } else {
        Some(state.start(None, None)?)
    };
    let server = spawn_server(&format!("{}:{}", a.host, a.port), state)
        .with_context(|| format!("binding {}:{}", a.host, a.port))?;
    let session = initial.as_ref().map(|h| h.id().to_string());
    ctx.emit(json!({ "addr": server.addr.to_string(), "session": session }), || {
        format!(
            "listening on {} ({})\n",
            server.addr,
            session.as_deref().map_or("no session".to_string(), |s| format!("session {s}"))
        )
    });
    std::io::stdout().flush()?;
    match initial {
        Some(h) if a.exit_after_session => {
            h.wait();
            // Let subscribers drain the end of the stream.
            std::thread::sleep(std::time::Duration::from_millis(200));
            server.shutdown()?;
        }
        _ => server.wait()?,
    }
    Ok(())
}

/// Sequence audit and verdict history of a recorded stream.
#[derive(Debug, Default)]
pub struct ReplaySummary {
    pub messages: usize,
    /// `(t, label, decision)` per verdict, in stream order.
    pub verdicts: Vec<(f64, String, f64)>,
    pub seq_gaps: usize,
    /// Verdicts whose recomputed decision value differs.
    pub mismatches: usize,
    pub outcome: Option<Value>,
}

pub fn replay_messages(msgs: &[WireMessage], model: Option<&SvmModel>) -> Result<ReplaySummary> {
    let mut summary = ReplaySummary {
        messages: msgs.len(),
        ..Default::default()
    };
    let mut last_seq: std::collections::BTreeMap<&str, u64> = std::collections::BTreeMap::new();
    let mut pending: Option<(f64, &[f64])> = None;
    for m in msgs {
        if let Some(id) = m.session.as_deref() {
            let prev = last_seq.insert(id, m.seq).unwrap_or(0);
            if m.seq != prev + 1 {
                summary.seq_gaps += 1;
            }
        }
        match &m.body {
            Body::Sample(s) => pending = Some((m.t, &s.features)),
            Body::Verdict(v) => {
                if let Some(model) = model {
                    match pending {
                        Some((t, x)) if t == m.t => {
                            if model.decision_value(x)?.to_bits() != v.decision.to_bits() {
                                summary.mismatches += 1;
                            }
                        }
                        _ => summary.mismatches += 1,
                    }
                }
                summary.verdicts.push((m.t, v.label.to_string(), v.decision));
                pending = None;
            }
            Body::Outcome(o) => summary.outcome = Some(serde_json::to_value(o)?),
            _ => {}
        }
    }
    Ok(summary)
}

fn replay(ctx: &Ctx, a: &ReplayArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.stream).with_context(|| format!("reading {}", a.stream.display()))?;
    let msgs = parse_stream(&text).map_err(|e| anyhow!("{}: {e}", a.stream.display()))?;
    let model = match &a.model {
        Some(p) => Some(SvmModel::load(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let r = replay_messages(&msgs, model.as_ref())?;
    let verdicts: Vec<Value> = r
        .verdicts
        .iter()
        .map(|(t, l, d)| json!({ "t": t, "label": l, "decision": d }))
        .collect();
    let v = json!({
        "messages": r.messages,
        "verdicts": verdicts,
        "seq_gaps": r.seq_gaps,
        "mismatches": model.as_ref().map(|_| r.mismatches),
        "outcome": r.outcome,
    });
    ctx.emit(v, || {
        let mut s = String::new();
        for (t, l, d) in &r.verdicts {
            s += &format!("{t:>9.2} {l:<9} {d:+.6e}\n");
        }
        s += &format!("{} messages, {} verdicts, {} sequence gaps", r.messages, r.verdicts.len(), r.seq_gaps);
        if model.is_some() {
            s += &format!(", {} verdict mismatches", r.mismatches);
        }
        s += "\n";
        if let Some(o) = &r.outcome {
            s += &format!("outcome {}\n", o["label"].as_str().unwrap_or("?"));
        }
        s
    });
    if r.seq_gaps > 0 || r.mismatches > 0 {
        bail!("stream failed the audit: {} sequence gaps, {} verdict mismatches", r.seq_gaps, r.mismatches);
    }
    Ok(())
}
