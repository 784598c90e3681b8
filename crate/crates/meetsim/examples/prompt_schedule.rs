//! Event-contingent, phase-aware self-report prompt scheduling.
//!
//! Shows the periodic schedule inside eligible phases, the end guard, the
//! minimum-spacing rule, and a trigger event that fires an extra prompt.
//!
//! ```bash
//! cargo run --example prompt_schedule
//! ```

use std::collections::BTreeMap;

use meetsim::scenario::{
    default_scenario, merge_into_spine, run_scenario, schedule_prompts, spine_order, EventRecord,
    Participant, PromptPolicy, TaskId,
};

fn main() {
    let scenario = default_scenario();
    let mut untimed = BTreeMap::new();
    untimed.insert("settlement_form".to_string(), 120.0);
    let mut spine = run_scenario(&scenario, &untimed, 0.0).unwrap();

    // A moderator marker lands inside T4's reveal phase (2175-2235 s); the
    // default scenario lists `reveal_marker` as a trigger there.
    spine.push(EventRecord {
        onset_s: 2180.0,
        duration_s: None,
        task: Some(TaskId::T4),
        phase: Some("reveal".into()),
        participant: None,
        stream: None,
        event_type: "reveal_marker".into(),
        value: None,
    });
    spine.sort_by(spine_order);

    let policy = PromptPolicy::default();
    println!(
        "policy: first prompt {}s into a phase, repeat every {}s, spacing >= {}s, \
         none within {}s of phase end, trigger latency {}s\n",
        policy.initial_delay_s,
        policy.periodic_s.unwrap_or(0.0),
        policy.min_spacing_s,
        policy.end_guard_s,
        policy.trigger_latency_s
    );

    let prompts = schedule_prompts(&scenario, &spine, &policy).unwrap();
    let times: Vec<f64> = prompts
        .iter()
        .filter(|p| p.participant == Some(Participant::P1))
        .map(|p| p.onset_s)
        .collect();
    println!("prompt times (per participant): {times:?}");
    println!(
        "  note 2182.0: the reveal marker at 2180 s fired a prompt {}s later",
        policy.trigger_latency_s
    );

    for pair in times.windows(2) {
        assert!(pair[1] - pair[0] >= policy.min_spacing_s);
    }
    println!("  spacing rule holds for all consecutive prompts");

    let full = merge_into_spine(spine, prompts);
    println!(
        "\nfull spine: {} events ({} of them prompt_vad, one per participant per time)",
        full.len(),
        full.iter().filter(|e| e.event_type == "prompt_vad").count()
    );
}
