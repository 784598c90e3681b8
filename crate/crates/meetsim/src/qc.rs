//! Quality control: pre-flight stream availability, gap detection against
//! nominal rates, audio level metrics, and the fail-loud session summary.
//! QC never repairs anything; it reports, and the summary maps to a process
//! exit status.

use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::syncfit::AlignedSample;
use crate::timeline::TimingReport;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Warning,
    Fatal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub severity: Severity,
    pub code: String,
    pub message: String,
}

/// Result of checking expected against discovered streams.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreflightReport {
    pub expected: Vec<String>,
    pub discovered: Vec<String>,
    pub findings: Vec<Finding>,
    pub pass: bool,
}

/// Compare expected stream ids against what is actually present. Missing
/// expected streams are fatal; unexpected extras are warnings.
pub fn preflight(expected: &[String], discovered: &[String]) -> PreflightReport {
    let mut expected: Vec<String> = expected.to_vec();
    expected.sort();
    expected.dedup();
    let mut discovered: Vec<String> = discovered.to_vec();
    discovered.sort();
    discovered.dedup();

    let mut findings = Vec::new();
    for id in &expected {
        if !discovered.contains(id) {
            findings.push(Finding {
                severity: Severity::Fatal,
                code: "missing_stream".into(),
                message: format!("expected stream {id} was not discovered"),
            });
        }
    }
    for id in &discovered {
        if !expected.contains(id) {
            findings.push(Finding {
                severity: Severity::Warning,
                code: "unexpected_stream".into(),
                message: format!("stream {id} present but not expected"),
            });
        }
    }
    let pass = findings.iter().all(|f| f.severity != Severity::Fatal);
    PreflightReport {
        expected,
        discovered,
        findings,
        pass,
    }
}

/// One detected gap in a stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapEntry {
    pub gap_start_auth_s: f64,
    pub gap_duration_s: f64,
    pub expected_samples_missing: u64,
}

/// Gap findings for one stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamGapReport {
    pub stream_id: String,
    pub gaps: Vec<GapEntry>,
    /// Set when the stream had fewer than two samples.
    pub insufficient_data: bool,
}

/// Gap findings for a whole session, ordered by stream id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub streams: Vec<StreamGapReport>,
}

impl GapReport {
    pub fn total_gaps(&self) -> usize {
        self.streams.iter().map(|s| s.gaps.len()).sum()
    }

    pub fn max_gap_s(&self) -> f64 {
        self.streams
            .iter()
            .flat_map(|s| &s.gaps)
            .map(|g| g.gap_duration_s)
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Error)]
pub enum QcError {
    #[error("k_intervals must be >= 2, got {0}")]
    InvalidKIntervals(f64),
    #[error("samples are not sorted by authoritative time")]
    UnsortedSamples,
    #[error("nominal rate must be positive, got {0}")]
    InvalidRate(f64),
    #[error("audio window [{0}, {1}) is invalid or outside the signal")]
    InvalidWindow(f64, f64),
    #[error("audio noise and signal windows overlap")]
    OverlappingWindows,
}

/// Detect gaps in an aligned stream: any inter-sample delta larger than
/// `k_intervals / nominal_rate_hz`. Returns the gap list plus a flag for
/// streams too short to judge.
pub fn detect_gaps(
    samples: &[AlignedSample],
    nominal_rate_hz: f64,
    k_intervals: f64,
) -> Result<(Vec<GapEntry>, bool), QcError> {
    if !(nominal_rate_hz > 0.0) {
        return Err(QcError::InvalidRate(nominal_rate_hz));
    }
    if !(k_intervals >= 2.0) {
        return Err(QcError::InvalidKIntervals(k_intervals));
    }
    if samples.len() < 2 {
        return Ok((Vec::new(), true));
    }
    if samples.windows(2).any(|w| w[0].t_auth_s > w[1].t_auth_s) {
        return Err(QcError::UnsortedSamples);
    }
    let period = 1.0 / nominal_rate_hz;
    let threshold = k_intervals * period;
    let mut gaps = Vec::new();
    for pair in samples.windows(2) {
        let delta = pair[1].t_auth_s - pair[0].t_auth_s;
        if delta > threshold {
            gaps.push(GapEntry {
                gap_start_auth_s: pair[0].t_auth_s + period,
                gap_duration_s: delta - period,
                expected_samples_missing: ((delta * nominal_rate_hz).round() as u64).saturating_sub(1),
            });
        }
    }
    Ok((gaps, false))
}

/// A dBFS level. Silent input yields negative infinity, serialized as the
/// string `"-inf"` (JSON has no infinities).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DbLevel(pub f64);

impl Serialize for DbLevel {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            serializer.serialize_f64(self.0)
        } else {
            serializer.serialize_str("-inf")
        }
    }
}

impl<'de> Deserialize<'de> for DbLevel {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct LevelVisitor;
        impl serde::de::Visitor<'_> for LevelVisitor {
            type Value = DbLevel;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a dBFS number or the string \"-inf\"")
            }
            fn visit_f64<E: serde::de::Error>(self, v: f64) -> Result<DbLevel, E> {
                Ok(DbLevel(v))
            }
            fn visit_i64<E: serde::de::Error>(self, v: i64) -> Result<DbLevel, E> {
                Ok(DbLevel(v as f64))
            }
            fn visit_u64<E: serde::de::Error>(self, v: u64) -> Result<DbLevel, E> {
                Ok(DbLevel(v as f64))
            }
            fn visit_str<E: serde::de::Error>(self, v: &str) -> Result<DbLevel, E> {
                if v == "-inf" {
                    Ok(DbLevel(f64::NEG_INFINITY))
                } else {
                    Err(E::invalid_value(serde::de::Unexpected::Str(v), &self))
                }
            }
        }
        deserializer.deserialize_any(LevelVisitor)
    }
}

/// Level metrics for one audio channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioQc {
    pub channel: String,
    pub peak_dbfs: DbLevel,
    pub rms_dbfs: DbLevel,
    pub snr_db: Option<f64>,
    pub clipping_sample_count: u64,
    pub silent: bool,
}

/// Samples at or above this magnitude count as clipped; kept below full
/// scale to catch near-saturation.
pub const CLIPPING_THRESHOLD: f64 = 0.999;

fn rms(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    (samples.iter().map(|x| x * x).sum::<f64>() / samples.len() as f64).sqrt()
}

fn window_slice(
    pcm: &[f64],
    sample_rate_hz: f64,
    window: (f64, f64),
) -> Result<&[f64], QcError> {
    let (start_s, end_s) = window;
    if !(start_s >= 0.0 && end_s > start_s) {
        return Err(QcError::InvalidWindow(start_s, end_s));
    }
    let start = (start_s * sample_rate_hz).round() as usize;
    let end = (end_s * sample_rate_hz).round() as usize;
    if end > pcm.len() || start >= end {
        return Err(QcError::InvalidWindow(start_s, end_s));
    }
    Ok(&pcm[start..end])
}

/// Compute peak, RMS, SNR and clipping for one channel of normalized PCM.
///
/// `noise_window` and `signal_window` are disjoint `[start_s, end_s)` spans;
/// SNR is the RMS ratio of the two in dB, `None` when the noise window is
/// digitally silent.
pub fn audio_metrics(
    channel: &str,
    pcm: &[f64],
    sample_rate_hz: f64,
    noise_window: (f64, f64),
    signal_window: (f64, f64),
) -> Result<AudioQc, QcError> {
    if !(sample_rate_hz > 0.0) {
        return Err(QcError::InvalidRate(sample_rate_hz));
    }
    let noise = window_slice(pcm, sample_rate_hz, noise_window)?;
    let signal = window_slice(pcm, sample_rate_hz, signal_window)?;
    if noise_window.1 > signal_window.0 && signal_window.1 > noise_window.0 {
        return Err(QcError::OverlappingWindows);
    }
    let peak = pcm.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    let rms_all = rms(pcm);
    let noise_rms = rms(noise);
    let signal_rms = rms(signal);
    let snr_db = if noise_rms > 0.0 && signal_rms > 0.0 {
        Some(20.0 * (signal_rms / noise_rms).log10())
    } else {
        None
    };
    Ok(AudioQc {
        channel: channel.to_string(),
        peak_dbfs: DbLevel(20.0 * peak.log10()),
        rms_dbfs: DbLevel(20.0 * rms_all.log10()),
        snr_db,
        clipping_sample_count: pcm.iter().filter(|x| x.abs() >= CLIPPING_THRESHOLD).count() as u64,
        silent: peak == 0.0,
    })
}

/// Overall session status; maps to the process exit code contract.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Ok,
    Warnings,
    Fatal,
}

impl SessionStatus {
    pub fn exit_code(&self) -> i32 {
        match self {
            SessionStatus::Ok => 0,
            SessionStatus::Warnings => 1,
            SessionStatus::Fatal => 2,
        }
    }
}

/// The aggregated, fail-loud session verdict (`session_summary.json`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub status: SessionStatus,
    pub exit_code: i32,
    pub fatal: Vec<String>,
    pub warnings: Vec<String>,
    pub preflight_pass: bool,
    pub timing_pass: bool,
    pub unaligned_streams: Vec<String>,
    pub gap_count: usize,
    pub max_gap_s: f64,
    pub max_gap_tolerance_s: f64,
    pub audio_channels: usize,
}

/// Fold all QC inputs into one summary. Fatal conditions: failed preflight,
/// any unaligned stream, any timing validation failure, or any gap longer
/// than `max_gap_s`. Everything else that is off-nominal is a warning.
pub fn session_summary(
    session_id: &str,
    preflight: &PreflightReport,
    timing: &TimingReport,
    gaps: &GapReport,
    audio: &[AudioQc],
    unaligned_streams: &[String],
    max_gap_s: f64,
) -> SessionSummary {
    let mut fatal = Vec::new();
    let mut warnings = Vec::new();

    for finding in &preflight.findings {
        match finding.severity {
            Severity::Fatal => fatal.push(format!("preflight: {}", finding.message)),
            Severity::Warning => warnings.push(format!("preflight: {}", finding.message)),
        }
    }
    for stream in unaligned_streams {
        fatal.push(format!("stream {stream} could not be aligned (no usable anchors)"));
    }
    for entry in &timing.entries {
        if !entry.pass {
            fatal.push(format!(
                "timing: device {} rms residual {:.6} s (tier {}) failed tolerance {:.6} s",
                entry.device_id, entry.rms_residual_s, entry.model.source_tier, timing.tolerance_s
            ));
        }
    }
    for stream in &gaps.streams {
        if stream.insufficient_data {
            warnings.push(format!("gaps: stream {} too short to assess", stream.stream_id));
        }
        for gap in &stream.gaps {
            let line = format!(
                "gaps: stream {} lost ~{} samples over {:.3} s starting at {:.3} s",
                stream.stream_id, gap.expected_samples_missing, gap.gap_duration_s, gap.gap_start_auth_s
            );
            if gap.gap_duration_s > max_gap_s {
                fatal.push(line);
            } else {
                warnings.push(line);
            }
        }
    }
    for entry in audio {
        if entry.silent {
            warnings.push(format!("audio: channel {} is digitally silent", entry.channel));
        }
        if entry.clipping_sample_count > 0 {
            warnings.push(format!(
                "audio: channel {} has {} samples at or above {CLIPPING_THRESHOLD}",
                entry.channel, entry.clipping_sample_count
            ));
        }
    }

    let status = if !fatal.is_empty() {
        SessionStatus::Fatal
    } else if !warnings.is_empty() {
        SessionStatus::Warnings
    } else {
        SessionStatus::Ok
    };
    SessionSummary {
        session_id: session_id.to_string(),
        status,
        exit_code: status.exit_code(),
        fatal,
        warnings,
        preflight_pass: preflight.pass,
        timing_pass: timing.all_pass(),
        unaligned_streams: unaligned_streams.to_vec(),
        gap_count: gaps.total_gaps(),
        max_gap_s: gaps.max_gap_s(),
        max_gap_tolerance_s: max_gap_s,
        audio_channels: audio.len(),
    }
}

/// The full QC report written to `derivatives/qc_report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QcReport {
    pub preflight: PreflightReport,
    pub gaps: GapReport,
    pub audio: Vec<AudioQc>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timeline::{ClockModel, DeviceTimingEntry, SourceTier};

    fn samples_at(times: &[f64]) -> Vec<AlignedSample> {
        times
            .iter()
            .map(|&t| AlignedSample { t_auth_s: t, values: vec![] })
            .collect()
    }

    fn empty_timing() -> TimingReport {
        TimingReport { entries: vec![], tolerance_s: 0.005 }
    }

    #[test]
    fn preflight_clean() {
        let ids = vec!["a".to_string(), "b".to_string()];
        let report = preflight(&ids, &ids);
        assert!(report.pass);
        assert!(report.findings.is_empty());
    }

    #[test]
    fn preflight_missing_stream_is_fatal_and_named() {
        let expected = vec!["gaze_P1".to_string(), "physio_P3".to_string()];
        let discovered = vec!["gaze_P1".to_string()];
        let report = preflight(&expected, &discovered);
        assert!(!report.pass);
        assert_eq!(report.findings.len(), 1);
        assert_eq!(report.findings[0].severity, Severity::Fatal);
        assert!(report.findings[0].message.contains("physio_P3"));
    }

    #[test]
    fn preflight_extra_stream_is_warning() {
        let expected = vec!["gaze_P1".to_string()];
        let discovered = vec!["gaze_P1".to_string(), "mic_spare".to_string()];
        let report = preflight(&expected, &discovered);
        assert!(report.pass);
        assert_eq!(report.findings.len(), 1);
        assert_eq!(report.findings[0].severity, Severity::Warning);
        assert!(report.findings[0].message.contains("mic_spare"));
    }

    #[test]
    fn regular_stream_has_no_gaps() {
        let times: Vec<f64> = (0..1000).map(|k| k as f64 / 100.0).collect();
        let (gaps, short) = detect_gaps(&samples_at(&times), 100.0, 3.0).unwrap();
        assert!(gaps.is_empty());
        assert!(!short);
    }

    #[test]
    fn half_second_hole_hand_checked() {
        // 100 Hz samples up to 0.50, then the next at 1.00.
        let mut times: Vec<f64> = (0..=50).map(|k| k as f64 / 100.0).collect();
        times.push(1.00);
        let (gaps, _) = detect_gaps(&samples_at(&times), 100.0, 3.0).unwrap();
        assert_eq!(gaps.len(), 1);
        assert!((gaps[0].gap_start_auth_s - 0.51).abs() < 1e-9);
        assert!((gaps[0].gap_duration_s - 0.49).abs() < 1e-9);
        assert_eq!(gaps[0].expected_samples_missing, 49);
    }

    #[test]
    fn short_stream_flagged_insufficient() {
        let (gaps, short) = detect_gaps(&samples_at(&[1.0]), 100.0, 3.0).unwrap();
        assert!(gaps.is_empty());
        assert!(short);
    }

    #[test]
    fn bad_k_rejected() {
        assert!(matches!(
            detect_gaps(&samples_at(&[0.0, 1.0]), 100.0, 1.0),
            Err(QcError::InvalidKIntervals(_))
        ));
    }

    #[test]
    fn full_scale_square_wave_peaks_at_zero_dbfs() {
        let pcm: Vec<f64> = (0..8000).map(|k| if k % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let qc = audio_metrics("ch", &pcm, 8000.0, (0.0, 0.5), (0.5, 1.0)).unwrap();
        assert_eq!(qc.peak_dbfs.0, 0.0);
        assert_eq!(qc.rms_dbfs.0, 0.0);
        assert_eq!(qc.clipping_sample_count, 8000);
    }

    #[test]
    fn quarter_scale_sine_peaks_near_minus_twelve_dbfs() {
        // 1 kHz at 8 kHz sampling puts samples exactly on the sine peaks.
        let pcm: Vec<f64> = (0..8000)
            .map(|k| 0.25 * (std::f64::consts::TAU * 1000.0 * k as f64 / 8000.0).sin())
            .collect();
        let qc = audio_metrics("ch", &pcm, 8000.0, (0.0, 0.5), (0.5, 1.0)).unwrap();
        assert!((qc.peak_dbfs.0 - (-12.0412)).abs() < 0.01, "peak {}", qc.peak_dbfs.0);
        assert_eq!(qc.clipping_sample_count, 0);
        assert!(!qc.silent);
    }

    #[test]
    fn snr_matches_closed_form() {
        let mut pcm = vec![0.0f64; 16000];
        for (k, v) in pcm.iter_mut().enumerate() {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            // First second: noise at rms 0.01; second second: signal at 0.1.
            *v = if k < 8000 { 0.01 * sign } else { 0.1 * sign };
        }
        let qc = audio_metrics("ch", &pcm, 8000.0, (0.0, 1.0), (1.0, 2.0)).unwrap();
        assert!((qc.snr_db.unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn silent_channel_reports_neg_inf_sentinel() {
        let pcm = vec![0.0f64; 16000];
        let qc = audio_metrics("ch", &pcm, 8000.0, (0.0, 1.0), (1.0, 2.0)).unwrap();
        assert!(qc.silent);
        assert!(qc.peak_dbfs.0.is_infinite());
        assert_eq!(qc.snr_db, None);
        let json = serde_json::to_string(&qc).unwrap();
        assert!(json.contains("\"-inf\""));
        let back: AudioQc = serde_json::from_str(&json).unwrap();
        assert_eq!(back, qc);
    }

    #[test]
    fn overlapping_windows_rejected() {
        let pcm = vec![0.1f64; 16000];
        assert!(matches!(
            audio_metrics("ch", &pcm, 8000.0, (0.0, 1.0), (0.5, 1.5)),
            Err(QcError::OverlappingWindows)
        ));
    }

    #[test]
    fn clean_summary_is_ok() {
        let ids = vec!["a".to_string()];
        let summary = session_summary(
            "001",
            &preflight(&ids, &ids),
            &empty_timing(),
            &GapReport::default(),
            &[],
            &[],
            5.0,
        );
        assert_eq!(summary.status, SessionStatus::Ok);
        assert_eq!(summary.exit_code, 0);
    }

    #[test]
    fn unaligned_stream_is_fatal_and_named() {
        let ids = vec!["a".to_string()];
        let summary = session_summary(
            "001",
            &preflight(&ids, &ids),
            &empty_timing(),
            &GapReport::default(),
            &[],
            &["gaze_P2".to_string()],
            5.0,
        );
        assert_eq!(summary.status, SessionStatus::Fatal);
        assert_eq!(summary.exit_code, 2);
        assert!(summary.fatal.iter().any(|f| f.contains("gaze_P2")));
    }

    #[test]
    fn small_gaps_warn_large_gaps_kill() {
        let ids = vec!["a".to_string()];
        let small = GapReport {
            streams: vec![StreamGapReport {
                stream_id: "a".into(),
                gaps: vec![GapEntry {
                    gap_start_auth_s: 10.0,
                    gap_duration_s: 2.0,
                    expected_samples_missing: 200,
                }],
                insufficient_data: false,
            }],
        };
        let summary = session_summary(
            "001", &preflight(&ids, &ids), &empty_timing(), &small, &[], &[], 5.0,
        );
        assert_eq!(summary.status, SessionStatus::Warnings);
        assert_eq!(summary.exit_code, 1);

        let big = GapReport {
            streams: vec![StreamGapReport {
                stream_id: "a".into(),
                gaps: vec![GapEntry {
                    gap_start_auth_s: 10.0,
                    gap_duration_s: 30.0,
                    expected_samples_missing: 3000,
                }],
                insufficient_data: false,
            }],
        };
        let summary = session_summary(
            "001", &preflight(&ids, &ids), &empty_timing(), &big, &[], &[], 5.0,
        );
        assert_eq!(summary.status, SessionStatus::Fatal);
    }

    #[test]
    fn summary_severity_is_monotone() {
        // Start from a warnings-only summary, then add a fatal timing entry:
        // severity may only go up.
        let ids = vec!["a".to_string()];
        let gaps = GapReport {
            streams: vec![StreamGapReport {
                stream_id: "a".into(),
                gaps: vec![GapEntry {
                    gap_start_auth_s: 1.0,
                    gap_duration_s: 1.0,
                    expected_samples_missing: 100,
                }],
                insufficient_data: false,
            }],
        };
        let warn = session_summary(
            "001", &preflight(&ids, &ids), &empty_timing(), &gaps, &[], &[], 5.0,
        );
        assert_eq!(warn.status, SessionStatus::Warnings);

        let failing = TimingReport {
            entries: vec![DeviceTimingEntry {
                device_id: "d".into(),
                model: ClockModel::identity("d", SourceTier::Lsl),
                rms_residual_s: 1.0,
                max_abs_residual_s: 1.0,
                pass: false,
            }],
            tolerance_s: 0.005,
        };
        let fatal = session_summary(
            "001", &preflight(&ids, &ids), &failing, &gaps, &[], &[], 5.0,
        );
        assert!(fatal.status > warn.status);
        assert_eq!(fatal.status, SessionStatus::Fatal);
    }
}
