//! Simulated acquisition devices: ground-truth clocks with offset, drift and
//! jitter, sample-stream generation, shared anchor pulses, and fault
//! injection. Truth is kept alongside the simulated data so that recovery
//! can always be audited against it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::scenario::Participant;
use crate::timeline::{AnchorTier, TimeAnchor};

/// Derive a child seed from a base seed and a purpose label. Stable across
/// platforms and releases, unlike the std hasher.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is long enough"))
}

/// The true clock of a simulated device.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthClock {
    pub device_id: String,
    pub true_offset_s: f64,
    pub true_drift_ppm: f64,
    /// Standard deviation of Gaussian read noise on device timestamps.
    pub jitter_sigma_s: f64,
    pub seed: u64,
}

impl GroundTruthClock {
    pub fn new(device_id: impl Into<String>, offset_s: f64, drift_ppm: f64, jitter_sigma_s: f64, seed: u64) -> Self {
        GroundTruthClock {
            device_id: device_id.into(),
            true_offset_s: offset_s,
            true_drift_ppm: drift_ppm,
            jitter_sigma_s,
            seed,
        }
    }

    pub fn slope(&self) -> f64 {
        1.0 + self.true_drift_ppm * 1e-6
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.slope() <= 0.0 {
            return Err(SimError::InvalidClock {
                device_id: self.device_id.clone(),
                reason: format!("drift {} ppm gives non-positive slope", self.true_drift_ppm),
            });
        }
        if self.jitter_sigma_s < 0.0 {
            return Err(SimError::InvalidClock {
                device_id: self.device_id.clone(),
                reason: format!("negative jitter sigma {}", self.jitter_sigma_s),
            });
        }
        Ok(())
    }

    /// The device reading at an authoritative instant, without read noise.
    pub fn device_time_exact(&self, t_auth_s: f64) -> f64 {
        (t_auth_s - self.true_offset_s) / self.slope()
    }

    /// Forward map: true authoritative time of a noiseless device reading.
    pub fn auth_time_exact(&self, t_device_s: f64) -> f64 {
        self.true_offset_s + self.slope() * t_device_s
    }

    /// A jitter source for one generation purpose. Separate purposes get
    /// independent deterministic streams, so generation order between
    /// streams never matters.
    pub fn jitter_rng(&self, purpose: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.seed, purpose))
    }
}

/// The device reading at an authoritative instant, with seeded read noise.
pub fn device_time(truth: &GroundTruthClock, t_auth_s: f64, rng: &mut ChaCha8Rng) -> f64 {
    let exact = truth.device_time_exact(t_auth_s);
    if truth.jitter_sigma_s > 0.0 {
        let noise = Normal::new(0.0, truth.jitter_sigma_s).expect("sigma validated");
        exact + noise.sample(rng)
    } else {
        exact
    }
}

/// Signal family carried by a stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Gaze,
    Physio,
    VideoFrames,
    AudioBlocks,
    Markers,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Gaze => "gaze",
            Modality::Physio => "physio",
            Modality::VideoFrames => "video_frames",
            Modality::AudioBlocks => "audio_blocks",
            Modality::Markers => "markers",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Static description of one sample stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamDescriptor {
    pub stream_id: String,
    pub device_id: String,
    pub participant: Participant,
    pub modality: Modality,
    pub nominal_rate_hz: f64,
    pub channels: Vec<String>,
}

impl StreamDescriptor {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.nominal_rate_hz > 0.0) {
            return Err(SimError::InvalidDescriptor {
                stream_id: self.stream_id.clone(),
                reason: format!("nominal rate must be positive, got {}", self.nominal_rate_hz),
            });
        }
        if self.channels.is_empty() {
            return Err(SimError::InvalidDescriptor {
                stream_id: self.stream_id.clone(),
                reason: "channel list is empty".into(),
            });
        }
        Ok(())
    }
}

/// One sample: a device-clock timestamp plus one value per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub t_device_s: f64,
    pub values: Vec<f64>,
}

/// A generated stream bundled with the truth that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedStream {
    pub descriptor: StreamDescriptor,
    pub truth: GroundTruthClock,
    pub samples: Vec<SampleRecord>,
}

/// One dropout window to inject, in authoritative time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutSpec {
    pub stream_id: String,
    pub start_auth_s: f64,
    pub duration_s: f64,
}

/// Anchor corruption: a seeded fraction of anchors get `bias_s` added to
/// their device-side timestamp.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorOutlierSpec {
    pub fraction: f64,
    pub bias_s: f64,
}

impl Default for AnchorOutlierSpec {
    fn default() -> Self {
        AnchorOutlierSpec { fraction: 0.0, bias_s: 0.0 }
    }
}

/// Faults to inject into an otherwise clean simulation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    #[serde(default)]
    pub dropouts: Vec<DropoutSpec>,
    #[serde(default)]
    pub anchor_outliers: AnchorOutlierSpec,
    /// Streams that are expected but never produced.
    #[serde(default)]
    pub missing_streams: Vec<String>,
    /// Devices that emit no timing anchors at all (their streams stay
    /// unalignable and must be reported as such).
    #[serde(default)]
    pub anchorless_devices: Vec<String>,
}

impl FaultSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        for d in &self.dropouts {
            if !(d.duration_s > 0.0) {
                return Err(SimError::InvalidFaultSpec(format!(
                    "dropout on {} has non-positive duration {}",
                    d.stream_id, d.duration_s
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.anchor_outliers.fraction) {
            return Err(SimError::InvalidFaultSpec(format!(
                "anchor outlier fraction {} outside [0, 1]",
                self.anchor_outliers.fraction
            )));
        }
        Ok(())
    }
}

/// Record of one injected dropout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutEvent {
    pub stream_id: String,
    pub start_auth_s: f64,
    pub duration_s: f64,
    pub samples_removed: usize,
}

/// Record of one biased anchor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorOutlierEvent {
    pub device_id: String,
    pub t_auth_s: f64,
    pub bias_s: f64,
}

/// Exactly what was injected, for auditing recovery and QC against truth.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FaultLog {
    pub dropouts: Vec<DropoutEvent>,
    pub anchor_outliers: Vec<AnchorOutlierEvent>,
    pub missing_streams: Vec<String>,
    pub anchorless_devices: Vec<String>,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid clock for {device_id}: {reason}")]
    InvalidClock { device_id: String, reason: String },
    #[error("invalid stream descriptor {stream_id}: {reason}")]
    InvalidDescriptor { stream_id: String, reason: String },
    #[error("invalid span [{0}, {1})")]
    InvalidSpan(f64, f64),
    #[error("descriptor {stream_id} names device {descriptor_device}, truth is for {truth_device}")]
    DeviceMismatch {
        stream_id: String,
        descriptor_device: String,
        truth_device: String,
    },
    #[error("anchor pulse times are not sorted")]
    UnsortedPulses,
    #[error("invalid fault spec: {0}")]
    InvalidFaultSpec(String),
    #[error("dropout window [{start}, {end}) lies outside the session span [{span_start}, {span_end})")]
    DropoutOutsideSession {
        start: f64,
        end: f64,
        span_start: f64,
        span_end: f64,
    },
    #[error("fault references unknown stream {0}")]
    UnknownStream(String),
}

/// Generate one stream over an authoritative span `[start, end)`.
///
/// One sample is produced per `1/rate` of authoritative time and
/// timestamped through the device clock (with jitter). Values come from a
/// per-channel seeded sinusoid-plus-noise generator, so identical seeds
/// reproduce identical streams byte for byte.
pub fn generate_stream(
    descriptor: &StreamDescriptor,
    truth: &GroundTruthClock,
    span_auth: (f64, f64),
    waveform_seed: u64,
) -> Result<Vec<SampleRecord>, SimError> {
    descriptor.validate()?;
    truth.validate()?;
    let (start, end) = span_auth;
    if !(start < end) || !start.is_finite() || !end.is_finite() {
        return Err(SimError::InvalidSpan(start, end));
    }
    if descriptor.device_id != truth.device_id {
        return Err(SimError::DeviceMismatch {
            stream_id: descriptor.stream_id.clone(),
            descriptor_device: descriptor.device_id.clone(),
            truth_device: truth.device_id.clone(),
        });
    }

    let rate = descriptor.nominal_rate_hz;
    let count = ((end - start) * rate).floor() as usize;
    let mut jitter = truth.jitter_rng(&format!("stream-jitter:{}", descriptor.stream_id));

    struct ChannelGen {
        amp: f64,
        freq_hz: f64,
        phase: f64,
        noise: Normal<f64>,
        rng: ChaCha8Rng,
    }
    let mut channels: Vec<ChannelGen> = descriptor
        .channels
        .iter()
        .map(|name| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                waveform_seed,
                &format!("wave:{}:{}", descriptor.stream_id, name),
            ));
            let uniform = rand::distr::Uniform::new(0.0f64, 1.0).expect("static bounds");
            let amp = 0.5 + uniform.sample(&mut rng);
            let freq_hz = 0.05 + 1.95 * uniform.sample(&mut rng);
            let phase = std::f64::consts::TAU * uniform.sample(&mut rng);
            ChannelGen {
                amp,
                freq_hz,
                phase,
                noise: Normal::new(0.0, 0.05).expect("static sigma"),
                rng,
            }
        })
        .collect();

    let mut samples = Vec::with_capacity(count);
    for k in 0..count {
        let t_auth = start + k as f64 / rate;
        let t_device = device_time(truth, t_auth, &mut jitter);
        let values = channels
            .iter_mut()
            .map(|c| {
                c.amp * (std::f64::consts::TAU * c.freq_hz * t_auth + c.phase).sin()
                    + c.noise.sample(&mut c.rng)
            })
            .collect();
        samples.push(SampleRecord { t_device_s: t_device, values });
    }
    Ok(samples)
}

/// Observe shared pulses on every device clock, yielding one anchor per
/// (device, pulse). Anchors are grouped by device, in pulse order.
pub fn emit_anchor_pulses(
    pulse_times_auth: &[f64],
    truths: &[GroundTruthClock],
    tier: AnchorTier,
) -> Result<Vec<TimeAnchor>, SimError> {
    if pulse_times_auth.windows(2).any(|w| w[0] > w[1]) {
        return Err(SimError::UnsortedPulses);
    }
    let mut anchors = Vec::with_capacity(pulse_times_auth.len() * truths.len());
    for truth in truths {
        truth.validate()?;
        let mut rng = truth.jitter_rng(&format!("anchors:{tier}"));
        for &pulse in pulse_times_auth {
            anchors.push(TimeAnchor::new(
                truth.device_id.clone(),
                device_time(truth, pulse, &mut rng),
                pulse,
                tier,
            ));
        }
    }
    Ok(anchors)
}

/// Apply a fault spec to generated streams and anchors.
///
/// Samples whose true authoritative time falls inside a dropout window are
/// removed; a seeded subset of anchors gets the configured bias added to
/// its device timestamp. Everything injected is recorded in the returned
/// [`FaultLog`].
pub fn inject_faults(
    mut streams: Vec<SimulatedStream>,
    mut anchors: Vec<TimeAnchor>,
    spec: &FaultSpec,
    seed: u64,
    session_span: (f64, f64),
) -> Result<(Vec<SimulatedStream>, Vec<TimeAnchor>, FaultLog), SimError> {
    spec.validate()?;
    let (span_start, span_end) = session_span;
    let mut log = FaultLog {
        missing_streams: spec.missing_streams.clone(),
        anchorless_devices: spec.anchorless_devices.clone(),
        ..FaultLog::default()
    };

    for dropout in &spec.dropouts {
        let end = dropout.start_auth_s + dropout.duration_s;
        if dropout.start_auth_s < span_start || end > span_end {
            return Err(SimError::DropoutOutsideSession {
                start: dropout.start_auth_s,
                end,
                span_start,
                span_end,
            });
        }
        let stream = streams
            .iter_mut()
            .find(|s| s.descriptor.stream_id == dropout.stream_id)
            .ok_or_else(|| SimError::UnknownStream(dropout.stream_id.clone()))?;
        let before = stream.samples.len();
        let truth = stream.truth.clone();
        stream.samples.retain(|s| {
            let t_auth = truth.auth_time_exact(s.t_device_s);
            !(t_auth >= dropout.start_auth_s && t_auth < end)
        });
        log.dropouts.push(DropoutEvent {
            stream_id: dropout.stream_id.clone(),
            start_auth_s: dropout.start_auth_s,
            duration_s: dropout.duration_s,
            samples_removed: before - stream.samples.len(),
        });
    }

    let fraction = spec.anchor_outliers.fraction;
    if fraction > 0.0 && !anchors.is_empty() {
        let n = anchors.len();
        let k = ((fraction * n as f64).round() as usize).min(n);
        if k > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "anchor-outliers"));
            let mut picked = rand::seq::index::sample(&mut rng, n, k).into_vec();
            picked.sort_unstable();
            for idx in picked {
                let anchor = &mut anchors[idx];
                anchor.t_device_s += spec.anchor_outliers.bias_s;
                log.anchor_outliers.push(AnchorOutlierEvent {
                    device_id: anchor.device_id.clone(),
                    t_auth_s: anchor.t_auth_s,
                    bias_s: spec.anchor_outliers.bias_s,
                });
            }
        }
    }

    Ok((streams, anchors, log))
}
