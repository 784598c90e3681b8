//! Gap detection, audio level metrics, and the fail-loud summary.
//!
//! ```bash
//! cargo run --example quality_control
//! ```

use meetsim::qc::{audio_metrics, detect_gaps, preflight, GapReport, StreamGapReport};
use meetsim::syncfit::AlignedSample;
use meetsim::timeline::TimingReport;

fn main() {
    // Pre-flight: one missing stream is fatal, one extra is a warning.
    let expected: Vec<String> = ["gaze_P1", "physio_P3", "mic_room"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let discovered: Vec<String> = ["gaze_P1", "mic_room", "mic_spare"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let pre = preflight(&expected, &discovered);
    println!("preflight pass = {}:", pre.pass);
    for finding in &pre.findings {
        println!("  [{:?}] {}", finding.severity, finding.message);
    }

    // Gap detection: a 100 Hz stream loses half a second.
    let mut times: Vec<f64> = (0..=50).map(|k| k as f64 / 100.0).collect();
    times.extend((100..200).map(|k| k as f64 / 100.0));
    let samples: Vec<AlignedSample> = times
        .iter()
        .map(|&t| AlignedSample { t_auth_s: t, values: vec![] })
        .collect();
    let (gaps, _) = detect_gaps(&samples, 100.0, 3.0).unwrap();
    println!("\ngaps in a 100 Hz stream:");
    for gap in &gaps {
        println!(
            "  {:.2} s of data missing from t={:.2} s (~{} samples)",
            gap.gap_duration_s, gap.gap_start_auth_s, gap.expected_samples_missing
        );
    }

    // Audio levels: a quarter-scale tone peaks at about -12 dBFS, the
    // conservative gain-staging target.
    let rate = 8000.0;
    let pcm: Vec<f64> = (0..40000)
        .map(|k| {
            let t = k as f64 / rate;
            if t < 1.0 {
                0.01 * if k % 2 == 0 { 1.0 } else { -1.0 } // noise floor
            } else {
                0.25 * (std::f64::consts::TAU * 1000.0 * t).sin()
            }
        })
        .collect();
    let audio = audio_metrics("mic_P1", &pcm, rate, (0.0, 1.0), (1.0, 5.0)).unwrap();
    println!(
        "\naudio mic_P1: peak {:.2} dBFS, rms {:.2} dBFS, snr {:.1} dB, {} clipped samples",
        audio.peak_dbfs.0,
        audio.rms_dbfs.0,
        audio.snr_db.unwrap(),
        audio.clipping_sample_count
    );

    // The summary folds everything into one verdict and exit code.
    let gap_report = GapReport {
        streams: vec![StreamGapReport {
            stream_id: "gaze_P1".into(),
            gaps,
            insufficient_data: false,
        }],
    };
    let timing = TimingReport { entries: vec![], tolerance_s: 0.005 };
    let summary = meetsim::qc::session_summary("demo", &pre, &timing, &gap_report, &[audio], &[], 5.0);
    println!(
        "\nsummary: status {:?} -> exit code {} ({} fatal, {} warnings)",
        summary.status,
        summary.exit_code,
        summary.fatal.len(),
        summary.warnings.len()
    );
    for line in summary.fatal.iter().chain(&summary.warnings) {
        println!("  {line}");
    }
}
