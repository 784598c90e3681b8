//! Writing a session tree, verifying its manifest, and reading it back.
//!
//! ```bash
//! cargo run --example package_session
//! ```

use meetsim::packager::{read_session, slice_runs, verify_manifest};
use meetsim::pipeline::{run_end_to_end, PipelineConfig, ScenarioSource};
use meetsim::scenario::{Block, Phase, PhaseDuration, Scenario, TaskId};

fn main() {
    // A short two-block protocol keeps this example quick; the default
    // protocol works identically (see the end_to_end example).
    let scenario = Scenario {
        blocks: vec![
            Block {
                task_id: TaskId::T0,
                phases: vec![Phase {
                    name: "warmup".into(),
                    duration_s: PhaseDuration::Timed(90.0),
                    prompt_eligible: true,
                    trigger_events: vec![],
                }],
            },
            Block {
                task_id: TaskId::T1,
                phases: vec![Phase {
                    name: "task".into(),
                    duration_s: PhaseDuration::Timed(120.0),
                    prompt_eligible: true,
                    trigger_events: vec![],
                }],
            },
        ],
    };

    let dir = tempfile::tempdir().unwrap();
    let scenario_path = dir.path().join("scenario.json");
    std::fs::write(&scenario_path, serde_json::to_string_pretty(&scenario).unwrap()).unwrap();
    let config = PipelineConfig {
        session_id: "demo".into(),
        scenario: ScenarioSource::Path(scenario_path),
        untimed_durations: Default::default(),
        anchor_pulse_period_s: 10.0,
        ..PipelineConfig::default()
    };

    let root = dir.path().join("ses-demo");
    let outcome = run_end_to_end(&config, &root).unwrap();
    println!(
        "wrote {} files; manifest created with {:?}",
        outcome.manifest.entries.len(),
        outcome.manifest.created_with
    );

    let issues = verify_manifest(&root).unwrap();
    println!("verify: {} integrity issues", issues.len());

    let read = read_session(&root).unwrap();
    println!(
        "read back: {} events, {} streams, {} anchors, session {}",
        read.bundle.events.len(),
        read.bundle.streams.len(),
        read.bundle.anchors.len(),
        read.bundle.session_id
    );

    let slices = slice_runs(&read.bundle).unwrap();
    for slice in &slices {
        let gaze = &slice.stream_ranges["gaze_P1"];
        println!(
            "  {} window [{:.0}, {:.0}) s -> gaze_P1 samples [{}, {})",
            slice.task_id, slice.window_start_s, slice.window_end_s, gaze.start_index, gaze.end_index
        );
    }

    // Corrupt one byte; the manifest check names the file.
    let victim = root.join("ses-demo_events.tsv");
    let mut bytes = std::fs::read(&victim).unwrap();
    bytes[20] ^= 1;
    std::fs::write(&victim, bytes).unwrap();
    let issues = verify_manifest(&root).unwrap();
    println!("\nafter flipping one byte:");
    for issue in &issues {
        println!("  {} -> {:?}", issue.relative_path, issue.kind);
    }
}
