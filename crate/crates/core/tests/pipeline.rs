use std::path::Path;

use gridsync_core::dynsim::{run_simulation, EventSchedule, SimOptions};
use gridsync_core::featureset::SplitMode;
use gridsync_core::pipeline::*;
use gridsync_core::scenario::{generate_scenarios, DiversificationConfig};
use gridsync_core::twoarea_case;

fn small(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk_scale(dir);
    cfg.name = "small".into();
    cfg.operating_points = 3;
    cfg.initial_conditions = 10;
    cfg.schedule.end_time = 60.0;
    cfg.cv.folds = 3;
    cfg
}

#[test]
fn shipped_config_is_the_desk_scale_experiment() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let cfg = ExperimentConfig::load(&path).unwrap();
    let expected = ExperimentConfig::desk_scale(path.parent().unwrap().join("../out/desk"));
    assert_eq!(cfg, expected);
    cfg.validate().unwrap();
}

#[test]
fn config_toml_round_trips() {
    let mut cfg = ExperimentConfig::desk_scale("out");
    cfg.placement = PlacementSpec::Buses(vec![6, 8]);
    cfg.relays = RelaySpec::None;
    cfg.split.mode = SplitMode::UnseenOp {
        train_groups: [0, 1, 2, 3, 4, 5].into(),
    };
    let text = cfg.to_toml().unwrap();
    assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
}

#[test]
fn invalid_configs_fail_at_the_config_stage() {
    let mut cfg = ExperimentConfig::desk_scale("out");
    cfg.operating_points = 0;
    assert_eq!(cfg.validate().unwrap_err().stage, Stage::Config);
    let mut cfg = ExperimentConfig::desk_scale("out");
    cfg.case = "/nonexistent/grid.case".into();
    assert_eq!(cfg.validate().unwrap_err().stage, Stage::Config);
    let mut cfg = ExperimentConfig::desk_scale("out");
    cfg.schedule.reconnect_times = vec![130.0];
    assert!(cfg.validate().is_err());
}

#[test]
fn single_example_dataset_fails_at_split() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.operating_points = 1;
    cfg.initial_conditions = 1;
    cfg.diversification.a = 0.0;
    cfg.diversification.b = 0.0;
    let err = run_experiment(&cfg).unwrap_err();
    assert_eq!(err.stage, Stage::Split, "{err}");
    // Upstream artifacts are kept for inspection.
    let names: Vec<String> = std::fs::read_dir(dir.path().join("artifacts"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(names.iter().any(|n| n.starts_with("scenarios-")));
    assert!(names.iter().any(|n| n.starts_with("dataset-")));
}

#[test]
fn variants_match_independent_runs() {
    let case = twoarea_case();
    let cfg = DiversificationConfig {
        seed: 3,
        ..Default::default()
    };
    let set = generate_scenarios(&case, &cfg, 1, 2).unwrap();
    let relays = RelaySpec::Standard { seed: 3 }.build(&case);
    let opts = SimOptions::default();
    let schedules = [EventSchedule::new(2.0, 12.0, 20.0), EventSchedule::new(2.0, 8.0, 20.0)];
    for ic in &set.initial_conditions {
        let shared = simulate_variants(&case, ic, &schedules, &relays, &opts).unwrap();
        for (s, out) in schedules.iter().zip(&shared) {
            assert_eq!(out, &run_simulation(&case, ic, s, &relays, &opts).unwrap());
        }
    }
}

#[test]
fn reruns_are_byte_identical_and_resume_from_cache() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_experiment(&small(a.path())).unwrap();
    let rb = run_experiment(&small(b.path())).unwrap();
    for f in ["report.txt", "report.csv", "report.json", "model.svm"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(ra.report, rb.report);
    let e = &ra.report.evaluation;
    assert!((0.0..=1.0).contains(&e.overall_stable) && (0.0..=1.0).contains(&e.overall_unstable));
    assert_eq!(ra.report.all.total(), 30);
    assert!(ra.stats.stages.iter().all(|s| !s.cached));

    // Drop the model only: everything upstream must come from the cache.
    for entry in std::fs::read_dir(&ra.artifacts).unwrap() {
        let p = entry.unwrap().path();
        if p.file_name().unwrap().to_string_lossy().starts_with("model-") {
            std::fs::remove_file(p).unwrap();
        }
    }
    let again = run_experiment(&small(a.path())).unwrap();
    let cached: Vec<(String, bool)> = again.stats.stages.iter().map(|s| (s.stage.clone(), s.cached)).collect();
    assert!(cached.contains(&("generate".into(), true)));
    assert!(cached.contains(&("simulate".into(), true)));
    assert!(cached.contains(&("cross-validate".into(), true)));
    assert!(cached.contains(&("train".into(), false)));
    assert_eq!(again.stats.simulations, 0);
    assert_eq!(again.report, ra.report);
    assert_eq!(
        std::fs::read(a.path().join("report.txt")).unwrap(),
        std::fs::read(b.path().join("report.txt")).unwrap()
    );
}

#[test]
fn sweep_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let base = run_experiment(&cfg).unwrap().report;
    let all: Vec<u32> = base.pmus.clone();
    let table = trusted_subset_sweep(&cfg, &[all.clone(), vec![6, 8], vec![7, 9]]).unwrap();
    assert_eq!(table.rows.len(), 3);
    assert_eq!(table.rows[0].pmus, all);
    assert_eq!(table.rows[0].stable, base.evaluation.overall_stable);
    assert_eq!(table.rows[0].unstable, base.evaluation.overall_unstable);
    assert_eq!(table.rows[0].chosen, base.chosen);
    for r in &table.rows {
        assert!((0.0..=1.0).contains(&r.stable) && (0.0..=1.0).contains(&r.unstable));
    }
    assert_eq!(table.rows[1].pmus, vec![6, 8]);
    assert!(trusted_subset_sweep(&cfg, &[]).unwrap().rows.is_empty());
    assert!(trusted_subset_sweep(&cfg, &[vec![99]]).is_err());
    assert!(trusted_subset_sweep(&cfg, &[vec![]]).is_err());
    assert!(dir.path().join("sweep.csv").is_file());
}

#[test]
fn report_text_lists_every_test_operating_point() {
    let dir = tempfile::tempdir().unwrap();
    let run = run_experiment(&small(dir.path())).unwrap();
    let text = run.report.to_text();
    for g in &run.report.evaluation.groups {
        assert!(text.lines().any(|l| l.starts_with(&format!("{:<8}", g.group))));
    }
    let csv = run.report.to_csv();
    assert_eq!(csv.lines().count(), run.report.evaluation.groups.len() + 2);
    assert!(csv.lines().last().unwrap().starts_with("all,"));
}
