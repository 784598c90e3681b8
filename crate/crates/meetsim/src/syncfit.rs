//! Clock-model recovery from timing anchors: tier selection, affine fitting
//! (ordinary least squares or Theil-Sen), stream alignment onto the
//! authoritative timeline, and session-level validation.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simdev::SampleRecord;
use crate::timeline::{
    map_time, model_residuals, AnchorTier, ClockModel, DeviceTimingEntry, SourceTier, TimeAnchor,
    TimeError, TimingReport,
};

/// Theil-Sen uses every pair up to this many anchors, then falls back to a
/// seeded subsample of [`THEIL_SEN_SUBSAMPLE_PAIRS`] pairs.
pub const THEIL_SEN_EXACT_MAX: usize = 2000;
pub const THEIL_SEN_SUBSAMPLE_PAIRS: usize = 2_000_000;
const THEIL_SEN_SUBSAMPLE_SEED: u64 = 0x7353_5542_5041_4952;

/// Anchors for all devices, grouped by device and tier.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnchorPool {
    by_device: BTreeMap<String, BTreeMap<AnchorTier, Vec<TimeAnchor>>>,
}

impl AnchorPool {
    pub fn new() -> Self {
        AnchorPool::default()
    }

    pub fn from_anchors<I: IntoIterator<Item = TimeAnchor>>(anchors: I) -> Self {
        let mut pool = AnchorPool::new();
        for anchor in anchors {
            pool.insert(anchor);
        }
        pool
    }

    pub fn insert(&mut self, anchor: TimeAnchor) {
        self.by_device
            .entry(anchor.device_id.clone())
            .or_default()
            .entry(anchor.tier)
            .or_default()
            .push(anchor);
    }

    /// Device ids present in the pool, sorted.
    pub fn devices(&self) -> impl Iterator<Item = &str> {
        self.by_device.keys().map(String::as_str)
    }

    pub fn tier_anchors(&self, device_id: &str, tier: AnchorTier) -> &[TimeAnchor] {
        self.by_device
            .get(device_id)
            .and_then(|tiers| tiers.get(&tier))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// The anchor set of the highest-priority non-empty tier for a device.
    /// An empty pool yields an empty slice and `SourceTier::Unaligned`.
    pub fn select_anchors(&self, device_id: &str) -> (&[TimeAnchor], SourceTier) {
        for tier in AnchorTier::ALL {
            let anchors = self.tier_anchors(device_id, tier);
            if !anchors.is_empty() {
                return (anchors, tier.into());
            }
        }
        (&[], SourceTier::Unaligned)
    }

    pub fn total_anchors(&self) -> usize {
        self.by_device
            .values()
            .flat_map(|tiers| tiers.values())
            .map(Vec::len)
            .sum()
    }
}

/// Estimator used for the affine fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    LeastSquares,
    TheilSen,
}

impl Estimator {
    pub fn as_str(&self) -> &'static str {
        match self {
            Estimator::LeastSquares => "least_squares",
            Estimator::TheilSen => "theil_sen",
        }
    }

    pub fn parse(s: &str) -> Option<Estimator> {
        match s {
            "least_squares" | "least-squares" => Some(Estimator::LeastSquares),
            "theil_sen" | "theil-sen" => Some(Estimator::TheilSen),
            _ => None,
        }
    }
}

/// Fit configuration: estimator plus the fallback rules for thin anchor sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitMethod {
    pub kind: Estimator,
    /// Minimum anchors for a full offset+drift fit; below this the fit
    /// degrades to offset-only (if enabled).
    pub min_anchors_full_model: usize,
    pub offset_only_fallback: bool,
}

impl Default for FitMethod {
    fn default() -> Self {
        FitMethod {
            kind: Estimator::TheilSen,
            min_anchors_full_model: 8,
            offset_only_fallback: true,
        }
    }
}

#[derive(Debug, Error)]
pub enum FitError {
    #[error("fit method invalid: {0}")]
    InvalidMethod(String),
    #[error("anchor belongs to device {found}, expected {expected}")]
    MixedDevices { expected: String, found: String },
    #[error("device {device_id}: {n} anchors share a single device timestamp, slope is unidentifiable")]
    DegenerateGeometry { device_id: String, n: usize },
    #[error("device {device_id}: {n} anchors is below the {required}-anchor minimum and offset-only fallback is disabled")]
    InsufficientAnchors {
        device_id: String,
        n: usize,
        required: usize,
    },
    #[error("device {device_id}: fitted slope {slope} is not positive")]
    DegenerateFit { device_id: String, slope: f64 },
    #[error("stream {stream_id} has an unaligned clock model and cannot be mapped")]
    UnalignedStream { stream_id: String },
    #[error("tolerance must be positive, got {0}")]
    InvalidTolerance(f64),
    #[error(transparent)]
    Time(#[from] TimeError),
}

fn median_of(mut values: Vec<f64>) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.total_cmp(b));
    let mid = values.len() / 2;
    if values.len().is_multiple_of(2) {
        (values[mid - 1] + values[mid]) / 2.0
    } else {
        values[mid]
    }
}

fn least_squares_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        let dx = x - mean_x;
        sxx += dx * dx;
        sxy += dx * (y - mean_y);
    }
    let slope = sxy / sxx;
    (slope, mean_y - slope * mean_x)
}

fn theil_sen_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len();
    let mut slopes;
    if n <= THEIL_SEN_EXACT_MAX {
        slopes = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = xs[j] - xs[i];
                if dx != 0.0 {
                    slopes.push((ys[j] - ys[i]) / dx);
                }
            }
        }
    } else {
        // Desk-scale runtime bound: sample pairs (with replacement) instead
        // of enumerating all O(n^2) of them.
        let mut rng = ChaCha8Rng::seed_from_u64(THEIL_SEN_SUBSAMPLE_SEED);
        let uniform = rand::distr::Uniform::new(0usize, n).expect("n > 0");
        use rand_distr::Distribution;
        slopes = Vec::with_capacity(THEIL_SEN_SUBSAMPLE_PAIRS);
        while slopes.len() < THEIL_SEN_SUBSAMPLE_PAIRS {
            let i = uniform.sample(&mut rng);
            let j = uniform.sample(&mut rng);
            let dx = xs[j] - xs[i];
            if dx != 0.0 {
                slopes.push((ys[j] - ys[i]) / dx);
            }
        }
    }
    let slope = median_of(slopes);
    let intercepts: Vec<f64> = xs.iter().zip(ys).map(|(&x, &y)| y - slope * x).collect();
    (slope, median_of(intercepts))
}

/// Fit a clock model for one device from its anchors.
///
/// With at least `min_anchors_full_model` anchors (and two distinct device
/// timestamps) the full affine model is estimated; with fewer anchors the
/// fit degrades to offset-only when the fallback is enabled; with no
/// anchors an unaligned model is returned.
pub fn fit_clock_model(
    device_id: &str,
    anchors: &[TimeAnchor],
    method: &FitMethod,
) -> Result<ClockModel, FitError> {
    if method.min_anchors_full_model < 2 {
        return Err(FitError::InvalidMethod(format!(
            "min_anchors_full_model must be >= 2, got {}",
            method.min_anchors_full_model
        )));
    }
    for anchor in anchors {
        if anchor.device_id != device_id {
            return Err(FitError::MixedDevices {
                expected: device_id.to_string(),
                found: anchor.device_id.clone(),
            });
        }
    }
    if anchors.is_empty() {
        return Ok(ClockModel::unaligned(device_id));
    }

    // The selected set normally shares one tier; if tiers are mixed, report
    // the least trusted one.
    let tier: SourceTier = anchors
        .iter()
        .map(|a| a.tier)
        .max()
        .map(SourceTier::from)
        .expect("anchors non-empty");

    let xs: Vec<f64> = anchors.iter().map(|a| a.t_device_s).collect();
    let ys: Vec<f64> = anchors.iter().map(|a| a.t_auth_s).collect();
    let has_two_distinct = xs.iter().any(|&x| x != xs[0]);

    let (offset_s, drift_ppm) = if anchors.len() >= method.min_anchors_full_model {
        if !has_two_distinct {
            return Err(FitError::DegenerateGeometry {
                device_id: device_id.to_string(),
                n: anchors.len(),
            });
        }
        let (slope, intercept) = match method.kind {
            Estimator::LeastSquares => least_squares_fit(&xs, &ys),
            Estimator::TheilSen => theil_sen_fit(&xs, &ys),
        };
        if !(slope > 0.0) {
            return Err(FitError::DegenerateFit {
                device_id: device_id.to_string(),
                slope,
            });
        }
        (intercept, (slope - 1.0) * 1e6)
    } else if method.offset_only_fallback {
        let deltas: Vec<f64> = anchors.iter().map(|a| a.t_auth_s - a.t_device_s).collect();
        (median_of(deltas), 0.0)
    } else {
        return Err(FitError::InsufficientAnchors {
            device_id: device_id.to_string(),
            n: anchors.len(),
            required: method.min_anchors_full_model,
        });
    };

    let mut model = ClockModel {
        device_id: device_id.to_string(),
        offset_s,
        drift_ppm,
        anchor_count: anchors.len(),
        rms_residual_s: 0.0,
        source_tier: tier,
    };
    let stats = model_residuals(&model, anchors)?;
    model.rms_residual_s = stats.rms_s;
    Ok(model)
}

/// One aligned sample: authoritative timestamp plus the untouched values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignedSample {
    pub t_auth_s: f64,
    pub values: Vec<f64>,
}

/// Map a stream's device timestamps onto the authoritative timeline.
///
/// Values pass through untouched; output is re-sorted in case jitter
/// inverted neighboring timestamps. Unaligned models are refused so the
/// stream is reported rather than silently passed along.
pub fn align_stream(
    stream_id: &str,
    samples: &[SampleRecord],
    model: &ClockModel,
) -> Result<Vec<AlignedSample>, FitError> {
    if model.is_unaligned() {
        return Err(FitError::UnalignedStream {
            stream_id: stream_id.to_string(),
        });
    }
    let mut aligned = Vec::with_capacity(samples.len());
    for sample in samples {
        aligned.push(AlignedSample {
            t_auth_s: map_time(model, sample.t_device_s)?,
            values: sample.values.clone(),
        });
    }
    aligned.sort_by(|a, b| a.t_auth_s.total_cmp(&b.t_auth_s));
    Ok(aligned)
}

/// Validate every fitted model against its selected anchors.
///
/// A device passes when its RMS residual is within tolerance and its model
/// is not unaligned. Entries are ordered by device id.
pub fn validate_session_alignment(
    models: &BTreeMap<String, ClockModel>,
    pool: &AnchorPool,
    tolerance_s: f64,
) -> Result<TimingReport, FitError> {
    if !(tolerance_s > 0.0) {
        return Err(FitError::InvalidTolerance(tolerance_s));
    }
    let mut entries = Vec::with_capacity(models.len());
    for (device_id, model) in models {
        let (anchors, _) = pool.select_anchors(device_id);
        let stats = model_residuals(model, anchors)?;
        entries.push(DeviceTimingEntry {
            device_id: device_id.clone(),
            model: model.clone(),
            rms_residual_s: stats.rms_s,
            max_abs_residual_s: stats.max_abs_s,
            pass: !model.is_unaligned() && stats.rms_s <= tolerance_s,
        });
    }
    Ok(TimingReport { entries, tolerance_s })
}

/// Fit with post-hoc repair: when the preferred tier's fit misses the
/// tolerance, refit on successively lower tiers and keep the first fit that
/// passes. Demotions are reported in the returned log; if no tier passes,
/// the preferred-tier fit is kept.
pub fn fit_device_with_repair(
    device_id: &str,
    pool: &AnchorPool,
    method: &FitMethod,
    tolerance_s: f64,
) -> Result<(ClockModel, Vec<String>), FitError> {
    let (anchors, tier) = pool.select_anchors(device_id);
    if tier == SourceTier::Unaligned {
        return Ok((ClockModel::unaligned(device_id), Vec::new()));
    }
    let primary = fit_clock_model(device_id, anchors, method)?;
    if primary.rms_residual_s <= tolerance_s {
        return Ok((primary, Vec::new()));
    }

    let mut log = Vec::new();
    let mut lower_tiers = AnchorTier::ALL
        .iter()
        .skip_while(|t| SourceTier::from(**t) != tier)
        .skip(1);
    let repaired = lower_tiers.find_map(|t| {
        let anchors = pool.tier_anchors(device_id, *t);
        if anchors.is_empty() {
            return None;
        }
        match fit_clock_model(device_id, anchors, method) {
            Ok(model) if model.rms_residual_s <= tolerance_s => Some((*t, model)),
            _ => None,
        }
    });
    match repaired {
        Some((t, model)) => {
            log.push(format!(
                "device {device_id}: tier {tier} fit rms {:.6} s exceeded tolerance {:.6} s; demoted to tier {t}",
                primary.rms_residual_s, tolerance_s
            ));
            Ok((model, log))
        }
        None => Ok((primary, log)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simdev::{emit_anchor_pulses, GroundTruthClock};
    use proptest::prelude::*;

    fn anchor(device: &str, x: f64, y: f64, tier: AnchorTier) -> TimeAnchor {
        TimeAnchor::new(device, x, y, tier)
    }

    #[test]
    fn tier_selection_prefers_lsl_over_frame_log() {
        let mut pool = AnchorPool::new();
        for k in 0..60 {
            pool.insert(anchor("cam", k as f64, k as f64, AnchorTier::Lsl));
        }
        for k in 0..1800 {
            pool.insert(anchor("cam", k as f64, k as f64, AnchorTier::FrameLog));
        }
        let (anchors, tier) = pool.select_anchors("cam");
        assert_eq!(anchors.len(), 60);
        assert_eq!(tier, SourceTier::Lsl);
    }

    #[test]
    fn tier_selection_single_tier_and_empty() {
        let mut pool = AnchorPool::new();
        for k in 0..3 {
            pool.insert(anchor("mic", k as f64, k as f64, AnchorTier::Sidecar));
        }
        let (anchors, tier) = pool.select_anchors("mic");
        assert_eq!(anchors.len(), 3);
        assert_eq!(tier, SourceTier::Sidecar);

        let (anchors, tier) = pool.select_anchors("nope");
        assert!(anchors.is_empty());
        assert_eq!(tier, SourceTier::Unaligned);
    }

    #[test]
    fn adding_lower_tier_anchors_never_changes_selection() {
        let mut pool = AnchorPool::new();
        for k in 0..10 {
            pool.insert(anchor("d", k as f64, k as f64, AnchorTier::EventLog));
        }
        let before: Vec<TimeAnchor> = pool.select_anchors("d").0.to_vec();
        for k in 0..100 {
            pool.insert(anchor("d", k as f64, k as f64 + 1.0, AnchorTier::Sidecar));
        }
        let (after, tier) = pool.select_anchors("d");
        assert_eq!(before, after);
        assert_eq!(tier, SourceTier::EventLog);
    }

    #[test]
    fn two_point_fit_is_exact() {
        let anchors = vec![
            anchor("d", 0.0, 0.5, AnchorTier::Lsl),
            anchor("d", 100.0, 100.505, AnchorTier::Lsl),
        ];
        let method = FitMethod {
            kind: Estimator::LeastSquares,
            min_anchors_full_model: 2,
            offset_only_fallback: false,
        };
        let model = fit_clock_model("d", &anchors, &method).unwrap();
        assert!((model.offset_s - 0.5).abs() < 1e-9, "offset {}", model.offset_s);
        assert!((model.drift_ppm - 50.0).abs() < 1e-6, "drift {}", model.drift_ppm);
        assert!(model.rms_residual_s < 1e-12);

        let ts = FitMethod { kind: Estimator::TheilSen, ..method };
        let model = fit_clock_model("d", &anchors, &ts).unwrap();
        assert!((model.offset_s - 0.5).abs() < 1e-9);
        assert!((model.drift_ppm - 50.0).abs() < 1e-6);
    }

    #[test]
    fn zero_jitter_anchors_recover_truth_to_nanoseconds() {
        let truth = GroundTruthClock::new("d", -0.25, -30.0, 0.0, 1);
        let pulses: Vec<f64> = (0..60).map(|k| 30.0 * k as f64).collect();
        let anchors = emit_anchor_pulses(&pulses, &[truth], AnchorTier::Lsl).unwrap();
        for kind in [Estimator::LeastSquares, Estimator::TheilSen] {
            let method = FitMethod { kind, ..FitMethod::default() };
            let model = fit_clock_model("d", &anchors, &method).unwrap();
            assert!((model.offset_s + 0.25).abs() <= 1e-9, "offset {}", model.offset_s);
            assert!((model.drift_ppm + 30.0).abs() <= 1e-3, "drift {}", model.drift_ppm);
            assert_eq!(model.anchor_count, 60);
            assert_eq!(model.source_tier, SourceTier::Lsl);
        }
    }

    #[test]
    fn offset_only_fallback_below_threshold() {
        let anchors = vec![
            anchor("d", 1.0, 1.5, AnchorTier::Lsl),
            anchor("d", 2.0, 2.5, AnchorTier::Lsl),
            anchor("d", 3.0, 3.5, AnchorTier::Lsl),
        ];
        let model = fit_clock_model("d", &anchors, &FitMethod::default()).unwrap();
        assert_eq!(model.drift_ppm, 0.0);
        assert!((model.offset_s - 0.5).abs() < 1e-12);
        assert_eq!(model.anchor_count, 3);
    }

    #[test]
    fn fallback_disabled_is_an_error() {
        let anchors = vec![anchor("d", 1.0, 1.5, AnchorTier::Lsl)];
        let method = FitMethod {
            offset_only_fallback: false,
            ..FitMethod::default()
        };
        assert!(matches!(
            fit_clock_model("d", &anchors, &method),
            Err(FitError::InsufficientAnchors { .. })
        ));
    }

    #[test]
    fn empty_anchor_set_gives_unaligned_model() {
        let model = fit_clock_model("d", &[], &FitMethod::default()).unwrap();
        assert!(model.is_unaligned());
        assert_eq!(model.anchor_count, 0);
    }

    #[test]
    fn identical_device_timestamps_are_degenerate() {
        let anchors: Vec<TimeAnchor> = (0..8)
            .map(|k| anchor("d", 5.0, k as f64, AnchorTier::Lsl))
            .collect();
        assert!(matches!(
            fit_clock_model("d", &anchors, &FitMethod::default()),
            Err(FitError::DegenerateGeometry { .. })
        ));
    }

    #[test]
    fn mixed_devices_rejected() {
        let anchors = vec![anchor("other", 0.0, 0.0, AnchorTier::Lsl)];
        assert!(matches!(
            fit_clock_model("d", &anchors, &FitMethod::default()),
            Err(FitError::MixedDevices { .. })
        ));
    }

    #[test]
    fn theil_sen_resists_biased_anchors() {
        let truth = GroundTruthClock::new("d", 0.4, 60.0, 0.0005, 7);
        let pulses: Vec<f64> = (0..60).map(|k| 30.0 * k as f64).collect();
        let mut anchors = emit_anchor_pulses(&pulses, &[truth], AnchorTier::Lsl).unwrap();
        for anchor in anchors.iter_mut().step_by(10) {
            anchor.t_device_s += 0.1; // 6 of 60 biased by +100 ms
        }
        let ts = fit_clock_model("d", &anchors, &FitMethod::default()).unwrap();
        assert!((ts.offset_s - 0.4).abs() <= 1e-3, "offset {}", ts.offset_s);
        assert!((ts.drift_ppm - 60.0).abs() <= 2.0, "drift {}", ts.drift_ppm);
    }

    #[test]
    fn theil_sen_subsampling_path_stays_accurate() {
        let truth = GroundTruthClock::new("d", -0.1, 25.0, 0.0005, 3);
        let pulses: Vec<f64> = (0..2500).map(|k| 0.7 * k as f64).collect();
        let anchors = emit_anchor_pulses(&pulses, &[truth], AnchorTier::FrameLog).unwrap();
        let model = fit_clock_model("d", &anchors, &FitMethod::default()).unwrap();
        assert!((model.offset_s + 0.1).abs() <= 1e-3);
        assert!((model.drift_ppm - 25.0).abs() <= 2.0);
        assert_eq!(model.source_tier, SourceTier::FrameLog);
    }

    #[test]
    fn align_stream_maps_and_preserves_values() {
        let model = ClockModel {
            device_id: "d".into(),
            offset_s: 0.5,
            drift_ppm: 50.0,
            anchor_count: 2,
            rms_residual_s: 0.0,
            source_tier: SourceTier::Lsl,
        };
        let samples = vec![SampleRecord { t_device_s: 1000.0, values: vec![1.0, 2.0] }];
        let aligned = align_stream("s", &samples, &model).unwrap();
        assert_eq!(aligned.len(), 1);
        assert!((aligned[0].t_auth_s - 1000.55).abs() < 1e-9);
        assert_eq!(aligned[0].values, vec![1.0, 2.0]);

        let identity = ClockModel::identity("d", SourceTier::Lsl);
        let aligned = align_stream("s", &samples, &identity).unwrap();
        assert_eq!(aligned[0].t_auth_s, 1000.0);
    }

    #[test]
    fn align_stream_refuses_unaligned_model() {
        let model = ClockModel::unaligned("d");
        let err = align_stream("s", &[], &model).unwrap_err();
        assert!(matches!(err, FitError::UnalignedStream { .. }));
    }

    #[test]
    fn align_stream_resorts_jitter_inversions() {
        let model = ClockModel::identity("d", SourceTier::Lsl);
        let samples = vec![
            SampleRecord { t_device_s: 1.01, values: vec![2.0] },
            SampleRecord { t_device_s: 1.00, values: vec![1.0] },
        ];
        let aligned = align_stream("s", &samples, &model).unwrap();
        assert_eq!(aligned[0].t_auth_s, 1.00);
        assert_eq!(aligned[1].t_auth_s, 1.01);
    }

    #[test]
    fn validation_flags_offset_only_fit_against_true_drift() {
        // Truth drifts 200 ppm; an offset-only model leaves residuals that
        // grow to ~0.18 s over a 1800 s span.
        let truth = GroundTruthClock::new("d", 0.0, 200.0, 0.0, 1);
        let pulses: Vec<f64> = (0..61).map(|k| 30.0 * k as f64).collect();
        let anchors = emit_anchor_pulses(&pulses, &[truth], AnchorTier::Lsl).unwrap();
        let pool = AnchorPool::from_anchors(anchors.clone());

        let offset_only = ClockModel {
            device_id: "d".into(),
            offset_s: median_of(anchors.iter().map(|a| a.t_auth_s - a.t_device_s).collect()),
            drift_ppm: 0.0,
            anchor_count: anchors.len(),
            rms_residual_s: 0.0,
            source_tier: SourceTier::Lsl,
        };
        let mut models = BTreeMap::new();
        models.insert("d".to_string(), offset_only);
        let report = validate_session_alignment(&models, &pool, 0.005).unwrap();
        assert!(!report.entries[0].pass);
        assert!((report.entries[0].max_abs_residual_s - 0.18).abs() < 0.01);

        // A proper fit passes at the same tolerance.
        let good = fit_clock_model("d", &anchors, &FitMethod::default()).unwrap();
        models.insert("d".to_string(), good);
        let report = validate_session_alignment(&models, &pool, 0.005).unwrap();
        assert!(report.entries[0].pass);
    }

    #[test]
    fn validation_fails_unaligned_devices() {
        let mut models = BTreeMap::new();
        models.insert("ghost".to_string(), ClockModel::unaligned("ghost"));
        let report = validate_session_alignment(&models, &AnchorPool::new(), 0.005).unwrap();
        assert!(!report.entries[0].pass);
        assert_eq!(report.entries[0].model.source_tier, SourceTier::Unaligned);
        assert_eq!(report.failing_devices(), vec!["ghost"]);
    }

    #[test]
    fn repair_demotes_to_healthy_lower_tier() {
        // Corrupt every lsl anchor; keep clean event_log anchors.
        let truth = GroundTruthClock::new("d", 0.2, 40.0, 0.0, 1);
        let pulses: Vec<f64> = (0..30).map(|k| 60.0 * k as f64).collect();
        let mut bad =
            emit_anchor_pulses(&pulses, std::slice::from_ref(&truth), AnchorTier::Lsl).unwrap();
        for (k, anchor) in bad.iter_mut().enumerate() {
            anchor.t_device_s += if k % 2 == 0 { 0.5 } else { -0.5 };
        }
        let good = emit_anchor_pulses(&pulses, &[truth], AnchorTier::EventLog).unwrap();
        let pool = AnchorPool::from_anchors(bad.into_iter().chain(good));

        let (model, log) =
            fit_device_with_repair("d", &pool, &FitMethod::default(), 0.005).unwrap();
        assert_eq!(model.source_tier, SourceTier::EventLog);
        assert_eq!(log.len(), 1);
        assert!(log[0].contains("demoted"));
        assert!((model.offset_s - 0.2).abs() < 1e-6);
    }

    #[test]
    fn repair_keeps_top_tier_when_nothing_passes() {
        let mut anchors = Vec::new();
        for k in 0..10 {
            let mut a = anchor("d", 30.0 * k as f64, 30.0 * k as f64, AnchorTier::Lsl);
            a.t_device_s += if k % 2 == 0 { 0.3 } else { -0.3 };
            anchors.push(a);
        }
        let pool = AnchorPool::from_anchors(anchors);
        let (model, log) =
            fit_device_with_repair("d", &pool, &FitMethod::default(), 0.005).unwrap();
        assert_eq!(model.source_tier, SourceTier::Lsl);
        assert!(model.rms_residual_s > 0.005);
        assert!(log.is_empty());
    }

    proptest! {
        #[test]
        fn align_preserves_count_and_values(
            offset in -2.0f64..2.0,
            drift in -200.0f64..200.0,
            times in proptest::collection::vec(0.0f64..3600.0, 1..50),
        ) {
            let model = ClockModel {
                device_id: "d".into(),
                offset_s: offset,
                drift_ppm: drift,
                anchor_count: 8,
                rms_residual_s: 0.0,
                source_tier: SourceTier::Lsl,
            };
            let samples: Vec<SampleRecord> = times
                .iter()
                .enumerate()
                .map(|(i, &t)| SampleRecord { t_device_s: t, values: vec![i as f64] })
                .collect();
            let aligned = align_stream("s", &samples, &model).unwrap();
            prop_assert_eq!(aligned.len(), samples.len());
            let mut got: Vec<f64> = aligned.iter().map(|a| a.values[0]).collect();
            got.sort_by(|a, b| a.total_cmp(b));
            let mut expect: Vec<f64> = samples.iter().map(|s| s.values[0]).collect();
            expect.sort_by(|a, b| a.total_cmp(b));
            prop_assert_eq!(got, expect);
            prop_assert!(aligned.windows(2).all(|w| w[0].t_auth_s <= w[1].t_auth_s));
        }

        #[test]
        fn fit_through_exact_affine_anchors_recovers_params(
            offset in -1.0f64..1.0,
            drift in -100.0f64..100.0,
            n in 8usize..40,
        ) {
            let anchors: Vec<TimeAnchor> = (0..n)
                .map(|k| {
                    let t_auth = 30.0 * k as f64;
                    let t_dev = (t_auth - offset) / (1.0 + drift * 1e-6);
                    anchor("d", t_dev, t_auth, AnchorTier::Lsl)
                })
                .collect();
            for kind in [Estimator::LeastSquares, Estimator::TheilSen] {
                let method = FitMethod { kind, ..FitMethod::default() };
                let model = fit_clock_model("d", &anchors, &method).unwrap();
                prop_assert!((model.offset_s - offset).abs() <= 1e-9);
                prop_assert!((model.drift_ppm - drift).abs() <= 1e-3);
            }
        }
    }
}
