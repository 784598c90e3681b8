//! The authoritative session timeline and the clock-model algebra.
//!
//! All times are double-precision seconds relative to the session start
//! (`t = 0` at the `session_start` event). The authoritative timeline is the
//! clock of the host that runs the protocol state machine; every other
//! device clock is related to it by an affine [`ClockModel`] recovered from
//! [`TimeAnchor`] observations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Provenance class of a timing anchor, ordered by trust (`Lsl` highest).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorTier {
    Lsl,
    EventLog,
    FrameLog,
    Sidecar,
}

impl AnchorTier {
    /// All tiers in descending trust order.
    pub const ALL: [AnchorTier; 4] = [
        AnchorTier::Lsl,
        AnchorTier::EventLog,
        AnchorTier::FrameLog,
        AnchorTier::Sidecar,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AnchorTier::Lsl => "lsl",
            AnchorTier::EventLog => "event_log",
            AnchorTier::FrameLog => "frame_log",
            AnchorTier::Sidecar => "sidecar",
        }
    }

    pub fn parse(s: &str) -> Option<AnchorTier> {
        match s {
            "lsl" => Some(AnchorTier::Lsl),
            "event_log" => Some(AnchorTier::EventLog),
            "frame_log" => Some(AnchorTier::FrameLog),
            "sidecar" => Some(AnchorTier::Sidecar),
            _ => None,
        }
    }
}

impl std::fmt::Display for AnchorTier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Anchor tier of a fitted model, or `Unaligned` when no anchors existed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTier {
    Lsl,
    EventLog,
    FrameLog,
    Sidecar,
    Unaligned,
}

impl From<AnchorTier> for SourceTier {
    fn from(tier: AnchorTier) -> Self {
        match tier {
            AnchorTier::Lsl => SourceTier::Lsl,
            AnchorTier::EventLog => SourceTier::EventLog,
            AnchorTier::FrameLog => SourceTier::FrameLog,
            AnchorTier::Sidecar => SourceTier::Sidecar,
        }
    }
}

impl SourceTier {
    pub fn as_str(&self) -> &'static str {
        match self {
            SourceTier::Lsl => "lsl",
            SourceTier::EventLog => "event_log",
            SourceTier::FrameLog => "frame_log",
            SourceTier::Sidecar => "sidecar",
            SourceTier::Unaligned => "unaligned",
        }
    }
}

impl std::fmt::Display for SourceTier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One paired observation of a device clock against the authoritative clock.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeAnchor {
    pub device_id: String,
    pub t_device_s: f64,
    pub t_auth_s: f64,
    pub tier: AnchorTier,
    pub weight: f64,
}

impl TimeAnchor {
    pub fn new(device_id: impl Into<String>, t_device_s: f64, t_auth_s: f64, tier: AnchorTier) -> Self {
        TimeAnchor {
            device_id: device_id.into(),
            t_device_s,
            t_auth_s,
            tier,
            weight: 1.0,
        }
    }
}

/// Affine map from a device clock to the authoritative timeline.
///
/// `t_auth = offset_s + (1 + drift_ppm * 1e-6) * t_device`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClockModel {
    pub device_id: String,
    /// Authoritative time at device time 0.
    pub offset_s: f64,
    /// Rate error in parts per million; slope = 1 + drift_ppm * 1e-6.
    pub drift_ppm: f64,
    pub anchor_count: usize,
    pub rms_residual_s: f64,
    pub source_tier: SourceTier,
}

impl ClockModel {
    /// Identity model: the device clock *is* the authoritative clock.
    pub fn identity(device_id: impl Into<String>, tier: SourceTier) -> Self {
        ClockModel {
            device_id: device_id.into(),
            offset_s: 0.0,
            drift_ppm: 0.0,
            anchor_count: 0,
            rms_residual_s: 0.0,
            source_tier: tier,
        }
    }

    /// Model for a device with no timing evidence at all.
    pub fn unaligned(device_id: impl Into<String>) -> Self {
        ClockModel::identity(device_id, SourceTier::Unaligned)
    }

    pub fn slope(&self) -> f64 {
        1.0 + self.drift_ppm * 1e-6
    }

    pub fn is_unaligned(&self) -> bool {
        self.source_tier == SourceTier::Unaligned
    }
}

#[derive(Debug, Error)]
pub enum TimeError {
    #[error("non-finite time value {0}")]
    NonFiniteTime(f64),
    #[error("clock model for {device_id} is degenerate (slope {slope})")]
    DegenerateModel { device_id: String, slope: f64 },
    #[error("anchor belongs to device {found}, expected {expected}")]
    DeviceMismatch { expected: String, found: String },
}

/// Map a device-clock time onto the authoritative timeline.
pub fn map_time(model: &ClockModel, t_device_s: f64) -> Result<f64, TimeError> {
    if !t_device_s.is_finite() {
        return Err(TimeError::NonFiniteTime(t_device_s));
    }
    let slope = model.slope();
    if slope <= 0.0 {
        return Err(TimeError::DegenerateModel {
            device_id: model.device_id.clone(),
            slope,
        });
    }
    Ok(model.offset_s + slope * t_device_s)
}

/// Inverse of [`map_time`]: authoritative time back to the device clock.
pub fn unmap_time(model: &ClockModel, t_auth_s: f64) -> Result<f64, TimeError> {
    if !t_auth_s.is_finite() {
        return Err(TimeError::NonFiniteTime(t_auth_s));
    }
    let slope = model.slope();
    if slope <= 0.0 {
        return Err(TimeError::DegenerateModel {
            device_id: model.device_id.clone(),
            slope,
        });
    }
    Ok((t_auth_s - model.offset_s) / slope)
}

/// Residual statistics of a model against a set of anchors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    pub rms_s: f64,
    pub max_abs_s: f64,
    /// `t_auth_i - map_time(model, t_device_i)` per anchor, in input order.
    pub residuals: Vec<f64>,
    /// True when the anchor list was empty.
    pub empty: bool,
}

/// Evaluate a model against anchors. Empty input yields zeroed stats with
/// the `empty` flag set rather than an error.
pub fn model_residuals(model: &ClockModel, anchors: &[TimeAnchor]) -> Result<ResidualStats, TimeError> {
    if anchors.is_empty() {
        return Ok(ResidualStats {
            rms_s: 0.0,
            max_abs_s: 0.0,
            residuals: Vec::new(),
            empty: true,
        });
    }
    let mut residuals = Vec::with_capacity(anchors.len());
    let mut sum_sq = 0.0;
    let mut max_abs = 0.0f64;
    for anchor in anchors {
        if anchor.device_id != model.device_id {
            return Err(TimeError::DeviceMismatch {
                expected: model.device_id.clone(),
                found: anchor.device_id.clone(),
            });
        }
        let r = anchor.t_auth_s - map_time(model, anchor.t_device_s)?;
        sum_sq += r * r;
        max_abs = max_abs.max(r.abs());
        residuals.push(r);
    }
    Ok(ResidualStats {
        rms_s: (sum_sq / anchors.len() as f64).sqrt(),
        max_abs_s: max_abs,
        residuals,
        empty: false,
    })
}

/// Per-device timing validation result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceTimingEntry {
    pub device_id: String,
    pub model: ClockModel,
    pub rms_residual_s: f64,
    pub max_abs_residual_s: f64,
    pub pass: bool,
}

/// Session-level alignment validation report (`timing_report.json`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub entries: Vec<DeviceTimingEntry>,
    pub tolerance_s: f64,
}

impl TimingReport {
    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn failing_devices(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| !e.pass)
            .map(|e| e.device_id.as_str())
            .collect()
    }
}
