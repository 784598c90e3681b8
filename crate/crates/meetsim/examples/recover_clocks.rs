//! Recovering clock models from anchors and validating them against the
//! ground truth that generated them.
//!
//! ```bash
//! cargo run --example recover_clocks
//! ```

use std::collections::BTreeMap;

use meetsim::simdev::{emit_anchor_pulses, GroundTruthClock};
use meetsim::syncfit::{fit_clock_model, validate_session_alignment, AnchorPool, FitMethod};
use meetsim::timeline::AnchorTier;

fn main() {
    let truths = vec![
        GroundTruthClock::new("tobii_P1", 0.35, 42.0, 0.0005, 11),
        GroundTruthClock::new("emotibit_P3", -0.88, -90.0, 0.0005, 12),
        GroundTruthClock::new("audio_if", 0.08, 5.0, 0.0002, 13),
    ];
    // 60 shared pulses over half an hour.
    let pulses: Vec<f64> = (0..60).map(|k| 30.0 * k as f64).collect();
    let anchors = emit_anchor_pulses(&pulses, &truths, AnchorTier::Lsl).unwrap();
    let pool = AnchorPool::from_anchors(anchors.iter().cloned());

    let method = FitMethod::default();
    println!(
        "fitting with {:?} (full model needs >= {} anchors)\n",
        method.kind, method.min_anchors_full_model
    );

    let mut models = BTreeMap::new();
    println!("{:<13} {:>10} {:>10} {:>9} {:>9} {:>9}", "device", "off true", "off fit", "ppm true", "ppm fit", "rms ms");
    for truth in &truths {
        let (selected, _) = pool.select_anchors(&truth.device_id);
        let model = fit_clock_model(&truth.device_id, selected, &method).unwrap();
        println!(
            "{:<13} {:>10.4} {:>10.4} {:>9.2} {:>9.2} {:>9.3}",
            truth.device_id,
            truth.true_offset_s,
            model.offset_s,
            truth.true_drift_ppm,
            model.drift_ppm,
            model.rms_residual_s * 1e3
        );
        models.insert(truth.device_id.clone(), model);
    }

    let report = validate_session_alignment(&models, &pool, 0.005).unwrap();
    println!("\nvalidation at {:.0} ms tolerance:", report.tolerance_s * 1e3);
    for entry in &report.entries {
        println!(
            "  {:<13} rms {:.3} ms, max {:.3} ms, tier {} -> {}",
            entry.device_id,
            entry.rms_residual_s * 1e3,
            entry.max_abs_residual_s * 1e3,
            entry.model.source_tier,
            if entry.pass { "pass" } else { "FAIL" }
        );
    }
    assert!(report.all_pass());
}
