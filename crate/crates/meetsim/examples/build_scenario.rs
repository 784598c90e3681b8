//! The built-in session protocol and the event spine it produces.
//!
//! ```bash
//! cargo run --example build_scenario
//! ```

use std::collections::BTreeMap;

use meetsim::scenario::{default_scenario, run_scenario, PhaseDuration, TaskId};

fn main() {
    let scenario = default_scenario();

    println!("protocol blocks:");
    for block in &scenario.blocks {
        print!("  {}:", block.task_id);
        for phase in &block.phases {
            match phase.duration_s {
                PhaseDuration::Timed(d) => print!(" {} {d:.0}s", phase.name),
                PhaseDuration::Untimed => print!(" {} (untimed)", phase.name),
            }
            if phase.prompt_eligible {
                print!("*");
            }
        }
        println!();
    }
    println!("  (* = prompt-eligible phase)\n");

    // Untimed phases need a concrete duration for simulation; the default
    // config uses 120 s for the settlement form.
    let mut untimed = BTreeMap::new();
    untimed.insert("settlement_form".to_string(), 120.0);

    let events = run_scenario(&scenario, &untimed, 0.0).expect("default scenario is valid");
    println!("event spine: {} boundary events", events.len());
    for event in &events {
        println!(
            "  {:>9.1}s  {:<13} {:<4} {}",
            event.onset_s,
            event.event_type,
            event.task.map(|t| t.to_string()).unwrap_or_default(),
            event.phase.as_deref().unwrap_or(""),
        );
    }

    let total: f64 = TaskId::ALL
        .iter()
        .map(|&t| scenario.timed_block_span(t))
        .sum();
    println!("\ntimed content: {total:.0} s; with the 120 s settlement form the session spans 2415 s");
}
