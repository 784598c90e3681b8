//! Pipeline-level integration: staged subcommands composing to the same
//! bytes as a single run, the CLI exit-code contract, and fail-loud
//! behavior for unalignable devices.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use meetsim::packager::read_session;
use meetsim::pipeline::{
    cmd_align, cmd_package, cmd_qc, cmd_simulate, cmd_slice, run_end_to_end, PipelineConfig,
    ScenarioSource,
};
use meetsim::scenario::{Block, Phase, PhaseDuration, Scenario, TaskId};
use meetsim::timeline::SourceTier;

fn tiny_scenario() -> Scenario {
    Scenario {
        blocks: vec![
            Block {
                task_id: TaskId::T0,
                phases: vec![Phase {
                    name: "warmup".into(),
                    duration_s: PhaseDuration::Timed(60.0),
                    prompt_eligible: false,
                    trigger_events: vec![],
                }],
            },
            Block {
                task_id: TaskId::T1,
                phases: vec![
                    Phase {
                        name: "talk".into(),
                        duration_s: PhaseDuration::Timed(45.0),
                        prompt_eligible: true,
                        trigger_events: vec![],
                    },
                    Phase {
                        name: "wrap".into(),
                        duration_s: PhaseDuration::Timed(15.0),
                        prompt_eligible: false,
                        trigger_events: vec![],
                    },
                ],
            },
        ],
    }
}

/// A fast config: default rig, two-minute session.
fn tiny_config(dir: &Path) -> PipelineConfig {
    let scenario_path = dir.join("tiny_scenario.json");
    let text = serde_json::to_string_pretty(&tiny_scenario()).unwrap();
    std::fs::write(&scenario_path, text).unwrap();
    PipelineConfig {
        session_id: "it01".into(),
        scenario: ScenarioSource::Path(scenario_path),
        untimed_durations: BTreeMap::new(),
        master_seed: 7,
        ..PipelineConfig::default()
    }
}

fn tree_files(root: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = walkdir::WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.path().strip_prefix(root).unwrap().to_path_buf())
        .collect();
    files.sort();
    files
}

#[test]
fn staged_subcommands_compose_to_run_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());

    let run_root = dir.path().join("run");
    run_end_to_end(&config, &run_root).unwrap();

    let staged_root = dir.path().join("staged");
    cmd_simulate(&config, &staged_root).unwrap();
    cmd_align(&config, &staged_root).unwrap();
    cmd_package(&config, &staged_root).unwrap();
    cmd_qc(&config, &staged_root).unwrap();

    let run_files = tree_files(&run_root);
    let staged_files = tree_files(&staged_root);
    assert_eq!(run_files, staged_files, "tree shapes differ");
    for rel in &run_files {
        let a = std::fs::read(run_root.join(rel)).unwrap();
        let b = std::fs::read(staged_root.join(rel)).unwrap();
        assert_eq!(a, b, "bytes differ in {}", rel.display());
    }

    // Re-slicing a packaged tree is byte-idempotent.
    let manifest_before = std::fs::read(staged_root.join("manifest.json")).unwrap();
    cmd_slice(&staged_root).unwrap();
    let manifest_after = std::fs::read(staged_root.join("manifest.json")).unwrap();
    assert_eq!(manifest_before, manifest_after);
}

#[test]
fn staged_composition_holds_under_faults() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(dir.path());
    config.faults.missing_streams.push("physio_P3".into());
    config.faults.anchorless_devices.push("jabra_room2".into());
    config.faults.dropouts.push(meetsim::simdev::DropoutSpec {
        stream_id: "gaze_P1".into(),
        start_auth_s: 30.0,
        duration_s: 6.0,
    });

    let run_root = dir.path().join("run");
    let outcome = run_end_to_end(&config, &run_root).unwrap();
    // Missing stream, unaligned stream, and a 6 s gap are all fatal.
    assert_eq!(outcome.summary.exit_code, 2);
    assert!(outcome.summary.unaligned_streams.contains(&"video_room2".to_string()));

    let staged_root = dir.path().join("staged");
    cmd_simulate(&config, &staged_root).unwrap();
    cmd_align(&config, &staged_root).unwrap();
    cmd_package(&config, &staged_root).unwrap();
    let summary = cmd_qc(&config, &staged_root).unwrap();
    assert_eq!(summary.exit_code, 2);

    let run_files = tree_files(&run_root);
    assert_eq!(run_files, tree_files(&staged_root));
    for rel in &run_files {
        assert_eq!(
            std::fs::read(run_root.join(rel)).unwrap(),
            std::fs::read(staged_root.join(rel)).unwrap(),
            "bytes differ in {}",
            rel.display()
        );
    }

    // Completeness reflects the faults.
    let manifest_text = std::fs::read_to_string(run_root.join("manifest.json")).unwrap();
    let manifest: serde_json::Value = serde_json::from_str(&manifest_text).unwrap();
    let completeness = &manifest["stream_completeness"];
    assert_eq!(completeness["physio_P3"], "missing");
    assert_eq!(completeness["gaze_P1"], "partial");
    assert_eq!(completeness["gaze_P2"], "present");
}

#[test]
fn slice_event_files_are_rebased_to_window_start() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let root = dir.path().join("ses");
    run_end_to_end(&config, &root).unwrap();

    // T1's window starts at 60 s; its slice file re-bases onsets to zero.
    // The window is half-open, so T0's block_end (same onset, lower task
    // in the tie-break) is its first row.
    let text =
        std::fs::read_to_string(root.join("derivatives/slices/task-T1_events.tsv")).unwrap();
    let mut lines = text.lines().skip(1);
    let first = lines.next().unwrap();
    assert!(first.starts_with("0.000000\tn/a\tT0"), "first row: {first}");
    assert!(first.contains("block_end"));
    let start_row = text.lines().find(|l| l.contains("block_start")).unwrap();
    assert!(start_row.starts_with("0.000000\tn/a\tT1"));
    let phase_row = text
        .lines()
        .find(|l| l.contains("phase_start") && l.contains("talk"))
        .unwrap();
    assert!(phase_row.starts_with("0.000000\t"));
    // The 45 s "talk" phase ends inside the window: "wrap" starts at +45.
    let wrap_row = text.lines().find(|l| l.contains("wrap")).unwrap();
    assert!(wrap_row.starts_with("45.000000\t"), "wrap row: {wrap_row}");
}

#[test]
fn participant_mapping_covers_the_default_rig() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let root = dir.path().join("ses");
    run_end_to_end(&config, &root).unwrap();

    let text = std::fs::read_to_string(root.join("derivatives/participant_mapping.tsv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "participant\tstream_id\tdevice_id\tmodality");
    // 4 gaze + 4 physio + 7 video + 5 audio + 1 markers.
    assert_eq!(lines.len() - 1, 21);
    assert!(lines.contains(&"P2\tgaze_P2\ttobii_P2\tgaze"));
    assert!(lines.contains(&"room\tvideo_room1\tjabra_room1\tvideo_frames"));
    assert!(lines.contains(&"room\tmarkers_room\thost\tmarkers"));
}

#[test]
fn anchorless_device_fails_loud() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(dir.path());
    config.faults.anchorless_devices.push("emotibit_P2".into());

    let root = dir.path().join("ses");
    let outcome = run_end_to_end(&config, &root).unwrap();
    assert_eq!(outcome.summary.exit_code, 2);
    assert_eq!(outcome.summary.unaligned_streams, vec!["physio_P2".to_string()]);

    let read = read_session(&root).unwrap();
    let stream = &read.bundle.streams["physio_P2"];
    assert_eq!(stream.model.source_tier, SourceTier::Unaligned);
    assert!(stream.aligned.is_empty());
    assert!(!stream.raw.is_empty(), "raw data still recorded");
}

#[test]
fn repeated_run_same_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let out_a = run_end_to_end(&config, &a).unwrap();
    let out_b = run_end_to_end(&config, &b).unwrap();
    assert_eq!(out_a.manifest, out_b.manifest);

    let mut changed = config.clone();
    changed.master_seed = 8;
    let c = dir.path().join("c");
    let out_c = run_end_to_end(&changed, &c).unwrap();
    assert_ne!(out_a.manifest.entries, out_c.manifest.entries);
}

fn run_cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_meetsim"))
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn cli_exit_code_contract() {
    let dir = tempfile::tempdir().unwrap();

    // Unknown flag: usage error.
    let out = run_cli(&["run", "--nonsense"]);
    assert_eq!(out.status.code(), Some(64));

    // Unparseable config: usage error.
    let bad_config = dir.path().join("bad.json");
    std::fs::write(&bad_config, "{ not json").unwrap();
    let out = run_cli(&[
        "run",
        "--config",
        bad_config.to_str().unwrap(),
        "-o",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(64));

    // Invalid method value: usage error.
    let out = run_cli(&[
        "run",
        "--method",
        "bogus",
        "-o",
        dir.path().join("y").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(64));

    // Non-positive tolerance: usage error.
    let out = run_cli(&[
        "run",
        "--tolerance-ms",
        "-5",
        "-o",
        dir.path().join("z").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(64));

    // QC on a directory that is not a session: I/O-ish state error.
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let out = run_cli(&["qc", "-o", empty.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(74));

    // Verify without a manifest: not a session.
    let out = run_cli(&["verify", "-o", empty.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(74));

    // Help exits cleanly.
    let out = run_cli(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn cli_verify_flags_corruption_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.json");
    // Small session via a scenario file next to the config.
    let scenario_path = dir.path().join("tiny_scenario.json");
    std::fs::write(
        &scenario_path,
        serde_json::to_string_pretty(&tiny_scenario()).unwrap(),
    )
    .unwrap();
    std::fs::write(
        &config_path,
        format!(
            "{{\"session_id\": \"it02\", \"scenario\": {:?}, \"untimed_durations\": {{}}, \"master_seed\": 7}}",
            scenario_path.to_str().unwrap()
        ),
    )
    .unwrap();

    let root = dir.path().join("ses");
    let out = run_cli(&[
        "run",
        "--config",
        config_path.to_str().unwrap(),
        "-o",
        root.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let out = run_cli(&["verify", "-o", root.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));

    // Flip one byte and verify again.
    let victim = root.join("ses-it02_events.tsv");
    let mut bytes = std::fs::read(&victim).unwrap();
    bytes[40] ^= 0x01;
    std::fs::write(&victim, bytes).unwrap();
    let out = run_cli(&["verify", "-o", root.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ses-it02_events.tsv"));
}

#[test]
fn tolerance_and_method_flags_change_behavior() {
    let dir = tempfile::tempdir().unwrap();
    let scenario_path = dir.path().join("tiny_scenario.json");
    std::fs::write(
        &scenario_path,
        serde_json::to_string_pretty(&tiny_scenario()).unwrap(),
    )
    .unwrap();
    let config_path = dir.path().join("config.json");
    // 10 s anchor cadence so the two-minute session still supports a full
    // offset+drift fit (the estimators then genuinely differ).
    std::fs::write(
        &config_path,
        format!(
            "{{\"scenario\": {:?}, \"untimed_durations\": {{}}, \"anchor_pulse_period_s\": 10.0}}",
            scenario_path.to_str().unwrap()
        ),
    )
    .unwrap();

    // An absurdly tight tolerance makes timing validation fail loudly.
    let root = dir.path().join("tight");
    let out = run_cli(&[
        "run",
        "--config",
        config_path.to_str().unwrap(),
        "--tolerance-ms",
        "0.000001",
        "-o",
        root.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    // Method flag is honored end to end: models differ between estimators.
    let ts_root = dir.path().join("ts");
    let ls_root = dir.path().join("ls");
    for (root, method) in [(&ts_root, "theil-sen"), (&ls_root, "least-squares")] {
        let out = run_cli(&[
            "run",
            "--config",
            config_path.to_str().unwrap(),
            "--method",
            method,
            "-o",
            root.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0));
    }
    let ts_models = std::fs::read(ts_root.join("derivatives/clock_models.json")).unwrap();
    let ls_models = std::fs::read(ls_root.join("derivatives/clock_models.json")).unwrap();
    assert_ne!(ts_models, ls_models);
}
