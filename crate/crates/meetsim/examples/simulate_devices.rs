//! Virtual acquisition devices: drifting clocks, sample streams, shared
//! anchor pulses, and fault injection.
//!
//! ```bash
//! cargo run --example simulate_devices
//! ```

use meetsim::scenario::Participant;
use meetsim::simdev::{
    emit_anchor_pulses, generate_stream, inject_faults, DropoutSpec, FaultSpec, GroundTruthClock,
    Modality, SimulatedStream, StreamDescriptor,
};
use meetsim::timeline::AnchorTier;

fn main() {
    // A clock that is 350 ms ahead of the authoritative timeline and runs
    // 42 ppm fast, with 0.5 ms of read jitter.
    let truth = GroundTruthClock::new("tobii_P1", 0.35, 42.0, 0.0005, 1234);
    println!(
        "device {}: offset {:.3} s, drift {} ppm ({:.1} ms over 30 min), jitter {} ms",
        truth.device_id,
        truth.true_offset_s,
        truth.true_drift_ppm,
        truth.true_drift_ppm * 1e-6 * 1800.0 * 1e3,
        truth.jitter_sigma_s * 1e3
    );

    let descriptor = StreamDescriptor {
        stream_id: "gaze_P1".into(),
        device_id: "tobii_P1".into(),
        participant: Participant::P1,
        modality: Modality::Gaze,
        nominal_rate_hz: 100.0,
        channels: vec!["gaze_x".into(), "gaze_y".into(), "pupil_mm".into()],
    };
    let samples = generate_stream(&descriptor, &truth, (0.0, 300.0), 42).unwrap();
    println!(
        "\ngenerated {} gaze samples over 300 s; first timestamps on the device clock:",
        samples.len()
    );
    for sample in &samples[..3] {
        println!("  t_device {:+.6} s, values {:?}", sample.t_device_s, sample.values);
    }
    println!("  (authoritative t=0 reads as about -0.35 s on this device)");

    // Shared pulses observed by every device become timing anchors.
    let pulses: Vec<f64> = (0..11).map(|k| 30.0 * k as f64).collect();
    let anchors = emit_anchor_pulses(&pulses, std::slice::from_ref(&truth), AnchorTier::Lsl).unwrap();
    println!("\n{} anchors from {} pulses:", anchors.len(), pulses.len());
    for anchor in anchors.iter().step_by(5) {
        println!(
            "  auth {:>6.1} s observed at device {:+.6} s",
            anchor.t_auth_s, anchor.t_device_s
        );
    }

    // Inject a dropout; the fault log records exactly what happened.
    let stream = SimulatedStream { descriptor, truth, samples };
    let faults = FaultSpec {
        dropouts: vec![DropoutSpec {
            stream_id: "gaze_P1".into(),
            start_auth_s: 100.0,
            duration_s: 12.0,
        }],
        ..FaultSpec::default()
    };
    let (streams, _, log) = inject_faults(vec![stream], anchors, &faults, 99, (0.0, 300.0)).unwrap();
    println!(
        "\ninjected dropout: {} samples removed from {} (window {:.0}-{:.0} s); {} samples remain",
        log.dropouts[0].samples_removed,
        log.dropouts[0].stream_id,
        log.dropouts[0].start_auth_s,
        log.dropouts[0].start_auth_s + log.dropouts[0].duration_s,
        streams[0].samples.len()
    );
}
