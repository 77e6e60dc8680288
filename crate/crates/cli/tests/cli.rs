use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use gridsync_core::dynsim::StabilityLabel;
use gridsync_core::featureset::{split, Dataset, PmuPlacement, SplitMode, SplitSpec};
use gridsync_core::pipeline::{evaluate, select_and_train, simulate_dataset, ExperimentConfig, ScheduleConfig};
use gridsync_core::scenario::{generate_scenarios, ScenarioManifest};
use gridsync_core::svm::{train, KernelSpec, SvmModel, TrainConfig};
use gridsync_core::twoarea_case;
use gridsync_live::{parse_stream, Body, CommandPayload, Phase, WireMessage};
use serde_json::Value;

fn gridsync(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridsync")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = gridsync(args);
    assert!(
        out.status.success(),
        "gridsync {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_status_two() {
    assert_eq!(gridsync(&["bogus"]).status.code(), Some(2));
    assert_eq!(gridsync(&["train", "--nope"]).status.code(), Some(2));
    assert_eq!(gridsync(&["evaluate"]).status.code(), Some(2));
    assert_eq!(gridsync(&[]).status.code(), Some(2));
    let help = gridsync(&["train", "--help"]);
    assert_eq!(help.status.code(), Some(0));
    let text = String::from_utf8(help.stdout).unwrap();
    for flag in ["--seed", "--out", "--config", "--jobs", "--json"] {
        assert!(text.contains(flag), "{flag} missing from train --help");
    }
}

#[test]
fn failures_exit_with_status_one_and_a_diagnostic() {
    let out = gridsync(&["evaluate", "--model", "/nonexistent/m.svm", "--dataset", "/nonexistent/d.ds"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    assert_eq!(gridsync(&["case-check", "--case", "/nonexistent.case"]).status.code(), Some(1));
    assert_eq!(gridsync(&["--jobs", "0", "case-check"]).status.code(), Some(1));
}

#[test]
fn case_check_reports_the_bundled_case() {
    let v: Value = serde_json::from_str(&ok(&["case-check", "--json"])).unwrap();
    let case = twoarea_case();
    assert_eq!(v["fingerprint"], case.fingerprint());
    assert_eq!(v["buses"], 12);
    assert_eq!(v["tie_lines"].as_array().unwrap().len(), 2);
    assert_eq!(v["power_flow"]["converged"], true);
    let file = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/twoarea.case");
    let w: Value = serde_json::from_str(&ok(&["case-check", "--json", "--case", p(&file)])).unwrap();
    assert_eq!(w["fingerprint"], v["fingerprint"]);
}

#[test]
fn config_and_seed_flags_set_the_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let out = dir.path().join("a");
    ok(&["--config", p(&config), "gen", "--ops", "1", "--ics", "2", "--out", p(&out)]);
    let m = ScenarioManifest::load(out.join("manifest.json")).unwrap();
    assert_eq!(m.config, ExperimentConfig::load(&config).unwrap().diversification);
    let out = dir.path().join("b");
    ok(&["gen", "--config", p(&config), "--seed", "5", "--ops", "1", "--ics", "2", "--out", p(&out)]);
    assert_eq!(ScenarioManifest::load(out.join("manifest.json")).unwrap().config.seed, 5);
}

#[test]
fn stage_commands_match_library_calls() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let scen = d.join("scen");
    let v: Value = serde_json::from_str(&ok(&[
        "gen", "--ops", "3", "--ics", "8", "--seed", "3", "--out", p(&scen), "--json",
    ]))
    .unwrap();
    assert_eq!(v["initial_conditions"], 24);

    let case = twoarea_case();
    let mut cfg = ExperimentConfig::desk_scale(d);
    cfg.diversification.seed = 3;
    let set = generate_scenarios(&case, &cfg.diversification, 3, 8).unwrap();
    assert_eq!(ScenarioManifest::load(scen.join("manifest.json")).unwrap(), set.manifest);
    let conditions: Value = serde_json::from_str(&std::fs::read_to_string(scen.join("conditions.json")).unwrap()).unwrap();
    assert_eq!(conditions, serde_json::to_value(&set.initial_conditions).unwrap());

    let ds_path = d.join("d.ds");
    ok(&[
        "dataset", "--manifest", p(&scen.join("manifest.json")), "--pmus", "6,8", "--end", "50", "--seed", "3",
        "--split", "multi:0.5", "--out", p(&ds_path),
    ]);
    let schedule = ScheduleConfig {
        end_time: 50.0,
        ..Default::default()
    };
    let placement = PmuPlacement::new(&case, [6, 8]).unwrap();
    let relays = gridsync_core::dynsim::RelayConfig::standard(&case, 3);
    let (ds, labels) = simulate_dataset(&case, &set, &schedule, &relays, &cfg.sim, &placement).unwrap();
    assert_eq!(Dataset::load(&ds_path).unwrap(), ds);
    assert_eq!(std::fs::read_to_string(d.join("d.labels.csv")).unwrap().lines().count(), labels.len() + 1);
    let spec = SplitSpec {
        mode: SplitMode::MultiOp { train_fraction: 0.5 },
        seed: 3,
    };
    let (tr, te) = split(&ds, &spec).unwrap();
    assert_eq!(Dataset::load(d.join("d.train.ds")).unwrap(), tr);
    assert_eq!(Dataset::load(d.join("d.test.ds")).unwrap(), te);

    let model_path = d.join("m.model");
    ok(&[
        "train", "--dataset", p(&d.join("d.train.ds")), "--grid", "default", "--k", "3", "--seed", "3", "--out",
        p(&model_path),
    ]);
    cfg.cv.folds = 3;
    cfg.cv.seed = 3;
    let (_, model) = select_and_train(&tr, &cfg.cv, 3).unwrap();
    assert_eq!(std::fs::read_to_string(&model_path).unwrap(), model.to_text());

    let v: Value = serde_json::from_str(&ok(&[
        "evaluate", "--model", p(&model_path), "--dataset", p(&d.join("d.test.ds")), "--json",
    ]))
    .unwrap();
    assert_eq!(v, serde_json::to_value(evaluate(&model, &te).unwrap()).unwrap());
    let text = ok(&["evaluate", "--model", p(&model_path), "--dataset", p(&d.join("d.test.ds"))]);
    assert!(text.lines().last().unwrap().starts_with("all"));

    let grid: Value = serde_json::from_str(&ok(&[
        "train", "--dataset", p(&d.join("d.train.ds")), "--grid", "gamma=1e-3;c=1,10", "--k", "3", "--out",
        p(&d.join("g.model")), "--json",
    ]))
    .unwrap();
    assert_eq!(grid["grid"].as_array().unwrap().len(), 2);
}

#[test]
fn simulate_writes_trace_events_and_outcome() {
    let dir = tempfile::tempdir().unwrap();
    let scen = dir.path().join("scen");
    ok(&["gen", "--ops", "1", "--ics", "2", "--out", p(&scen)]);
    let out = dir.path().join("sim");
    let v: Value = serde_json::from_str(&ok(&[
        "simulate", "--manifest", p(&scen.join("manifest.json")), "--ic", "0.1", "--reconnect", "20", "--end", "30",
        "--out", p(&out), "--json",
    ]))
    .unwrap();
    for f in ["trace.txt", "events.txt", "outcome.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let text = std::fs::read_to_string(out.join("trace.txt")).unwrap();
    let trace = gridsync_core::dynsim::Trace::read_from(text.as_bytes()).unwrap();
    assert_eq!(v["trace_digest"], trace.digest());
    assert_eq!(v["schedule"]["reconnect_time"], 20.0);
    let bad = gridsync(&["simulate", "--manifest", p(&scen.join("manifest.json")), "--ic", "4.0", "--out", p(&out)]);
    assert_eq!(bad.status.code(), Some(1));
}

/// Stable when the angle across the 6-8 tie is small.
fn angle_model() -> SvmModel {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..40 {
        let a = -20.0 + i as f64;
        let d = if i % 2 == 0 { 5.0 + i as f64 } else { 90.0 + 2.0 * i as f64 };
        x.push(vec![1.0, a, 1.0, a + d]);
        y.push(if d < 60.0 { StabilityLabel::Stable } else { StabilityLabel::Unstable });
    }
    let cfg = TrainConfig {
        scale: false,
        ..TrainConfig::new(KernelSpec::Rbf { gamma: 1e-3 }, 10.0)
    };
    train(&x, &y, &cfg).unwrap()
}

fn send(stream: &mut TcpStream, seq: u64, cmd: CommandPayload) {
    let line = WireMessage::command(seq, cmd).to_line() + "\n";
    stream.write_all(line.as_bytes()).unwrap();
}

#[test]
fn serve_streams_a_session_that_replays_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let model_path = dir.path().join("angle.svm");
    angle_model().save(&model_path).unwrap();
    let mut server = Command::new(env!("CARGO_BIN_EXE_gridsync"))
        .args([
            "serve", "--model", p(&model_path), "--pmus", "6,8", "--port", "0", "--pacing", "40", "--island", "1",
            "--post", "3", "--exit-after-session", "--json",
        ])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut first = String::new();
    BufReader::new(server.stdout.as_mut().unwrap()).read_line(&mut first).unwrap();
    let hello: Value = serde_json::from_str(&first).unwrap();
    assert_eq!(hello["session"], "s1");
    let addr = hello["addr"].as_str().unwrap().to_string();

    let mut stream = TcpStream::connect(&addr).unwrap();
    send(&mut stream, 1, CommandPayload::Subscribe { session: None });
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut recorded = String::new();
    let mut reconnect_sent = false;
    let mut line = String::new();
    while reader.read_line(&mut line).unwrap() > 0 {
        let m = WireMessage::from_line(&line).unwrap();
        if m.session.is_some() {
            recorded += &line;
        }
        if !reconnect_sent && m.t > 2.0 && matches!(m.body, Body::Sample(_)) {
            send(&mut stream, 2, CommandPayload::Reconnect);
            reconnect_sent = true;
        }
        if matches!(&m.body, Body::Phase(ph) if ph.phase == Phase::Terminated) {
            break;
        }
        line.clear();
    }
    assert!(server.wait().unwrap().success());

    let msgs = parse_stream(&recorded).unwrap();
    assert!(msgs.iter().any(|m| matches!(&m.body, Body::Ack(a) if a.command == "reconnect" && a.re == 2)));
    let outcome = msgs
        .iter()
        .find_map(|m| match &m.body {
            Body::Outcome(o) => Some(o.clone()),
            _ => None,
        })
        .unwrap();
    assert!(outcome.reconnect_time.is_some());

    let file = dir.path().join("session.ndjson");
    std::fs::write(&file, &recorded).unwrap();
    let args = ["replay", "--stream", p(&file), "--model", p(&model_path), "--json"];
    let once = ok(&args);
    assert_eq!(once, ok(&args));
    let v: Value = serde_json::from_str(&once).unwrap();
    assert_eq!(v["seq_gaps"], 0);
    assert_eq!(v["mismatches"], 0);
    let n_verdicts = msgs.iter().filter(|m| matches!(m.body, Body::Verdict(_))).count();
    assert!(n_verdicts > 50);
    assert_eq!(v["verdicts"].as_array().unwrap().len(), n_verdicts);

    // A tampered decision value and a dropped message both fail the audit.
    let mut tampered: Vec<WireMessage> = msgs.clone();
    let i = tampered.iter().position(|m| matches!(m.body, Body::Verdict(_))).unwrap();
    if let Body::Verdict(v) = &mut tampered[i].body {
        v.decision += 1e-9;
    }
    let text: String = tampered.iter().map(|m| m.to_line() + "\n").collect();
    std::fs::write(&file, text).unwrap();
    assert_eq!(gridsync(&args).status.code(), Some(1));
    let text: String = msgs.iter().enumerate().filter(|(k, _)| *k != 5).map(|(_, m)| m.to_line() + "\n").collect();
    std::fs::write(&file, text).unwrap();
    assert_eq!(gridsync(&["replay", "--stream", p(&file)]).status.code(), Some(1));
}
