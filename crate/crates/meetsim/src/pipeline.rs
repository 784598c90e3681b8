//! End-to-end orchestration: configuration, the default device rig, and the
//! pipeline stages behind the CLI subcommands. Every stage is deterministic
//! given the configuration and master seed, and the staged subcommands
//! (`simulate`, `align`, `package`, `qc`) compose to the same bytes as a
//! single `run`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::jsonio;
use crate::packager::{
    self, AudioClip, PackageError, ProvenanceInfo, QcArtifacts, SessionBundle, SessionManifest,
    StreamData,
};
use crate::qc::{self, GapReport, QcError, QcReport, SessionSummary, StreamGapReport};
use crate::scenario::{
    default_scenario, merge_into_spine, run_scenario, schedule_prompts, EventRecord, Participant,
    PromptPolicy, Scenario, ScenarioError, EVENT_SESSION_END,
};
use crate::simdev::{
    derive_seed, emit_anchor_pulses, generate_stream, inject_faults, FaultLog, FaultSpec,
    GroundTruthClock, Modality, SimError, SimulatedStream, StreamDescriptor,
};
use crate::syncfit::{
    align_stream, fit_device_with_repair, validate_session_alignment, AnchorPool, FitError,
    FitMethod,
};
use crate::timeline::{AnchorTier, ClockModel, TimeAnchor, TimingReport};
use crate::tsv::quantize_seconds;

/// Where the scenario comes from: the built-in default or a JSON file.
#[derive(Clone, Debug, PartialEq)]
pub enum ScenarioSource {
    Default,
    Path(PathBuf),
}

impl Serialize for ScenarioSource {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            ScenarioSource::Default => serializer.serialize_str("default"),
            ScenarioSource::Path(p) => serializer.serialize_str(&p.to_string_lossy()),
        }
    }
}

impl<'de> Deserialize<'de> for ScenarioSource {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        if s == "default" {
            Ok(ScenarioSource::Default)
        } else {
            Ok(ScenarioSource::Path(PathBuf::from(s)))
        }
    }
}

/// One device's true clock parameters (the seed is derived from the master
/// seed, not stored here).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub device_id: String,
    pub true_offset_s: f64,
    pub true_drift_ppm: f64,
    pub jitter_sigma_s: f64,
}

/// QC thresholds and audio analysis windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QcConfig {
    /// Inter-sample deltas beyond this many nominal intervals are gaps.
    pub k_intervals: f64,
    /// Gaps longer than this are fatal rather than warnings.
    pub max_gap_s: f64,
    /// `[start_s, end_s)` of the noise segment in simulated audio.
    pub noise_window: [f64; 2],
    /// `[start_s, end_s)` of the signal segment in simulated audio.
    pub signal_window: [f64; 2],
}

impl Default for QcConfig {
    fn default() -> Self {
        QcConfig {
            k_intervals: 3.0,
            max_gap_s: 5.0,
            noise_window: [0.0, 1.0],
            signal_window: [1.0, 5.0],
        }
    }
}

/// Synthetic PCM parameters for the close-talk audio clips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AudioSimConfig {
    pub sample_rate_hz: u32,
    /// Gain-staging target: 0.25 full scale peaks at about -12 dBFS.
    pub tone_amplitude: f64,
    pub tone_freq_hz: f64,
    pub tone_s: f64,
    pub noise_sigma: f64,
    pub noise_s: f64,
}

impl Default for AudioSimConfig {
    fn default() -> Self {
        AudioSimConfig {
            sample_rate_hz: 8000,
            tone_amplitude: 0.25,
            tone_freq_hz: 1000.0,
            tone_s: 4.0,
            noise_sigma: 0.01,
            noise_s: 1.0,
        }
    }
}

/// The one configuration object driving every pipeline stage. All fields
/// have defaults; an empty JSON object is a valid config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub session_id: String,
    pub scenario: ScenarioSource,
    pub untimed_durations: BTreeMap<String, f64>,
    pub gap_between_blocks_s: f64,
    pub master_seed: u64,
    pub devices: Vec<DeviceSpec>,
    pub streams: Vec<StreamDescriptor>,
    /// Shared LSL-style pulse cadence observed by every device.
    pub anchor_pulse_period_s: f64,
    /// Cadence of frame-log anchors on video devices.
    pub frame_anchor_period_s: f64,
    /// Sidecar anchors spread evenly over the session, per device.
    pub sidecar_anchors_per_device: usize,
    pub faults: FaultSpec,
    pub fit: FitMethod,
    pub tolerance_s: f64,
    pub prompts: PromptPolicy,
    pub qc: QcConfig,
    pub audio: AudioSimConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut untimed = BTreeMap::new();
        untimed.insert("settlement_form".to_string(), 120.0);
        PipelineConfig {
            session_id: "001".into(),
            scenario: ScenarioSource::Default,
            untimed_durations: untimed,
            gap_between_blocks_s: 0.0,
            master_seed: 42,
            devices: default_devices(),
            streams: default_streams(),
            anchor_pulse_period_s: 30.0,
            frame_anchor_period_s: 1.0,
            sidecar_anchors_per_device: 3,
            faults: FaultSpec::default(),
            fit: FitMethod::default(),
            tolerance_s: 0.005,
            prompts: PromptPolicy::default(),
            qc: QcConfig::default(),
            audio: AudioSimConfig::default(),
        }
    }
}

/// The default rig: four eye trackers, four physiology wearables, seven
/// cameras, one audio interface carrying five microphones, and the host
/// itself (offset 0, drift 0: it is the authoritative clock).
pub fn default_devices() -> Vec<DeviceSpec> {
    let spec = |id: &str, offset: f64, drift: f64, jitter: f64| DeviceSpec {
        device_id: id.into(),
        true_offset_s: offset,
        true_drift_ppm: drift,
        jitter_sigma_s: jitter,
    };
    vec![
        spec("host", 0.0, 0.0, 0.0),
        spec("tobii_P1", 0.35, 42.0, 0.0005),
        spec("tobii_P2", -0.62, -77.0, 0.0005),
        spec("tobii_P3", 0.18, 12.5, 0.0005),
        spec("tobii_P4", -0.05, 95.0, 0.0005),
        spec("emotibit_P1", 0.73, -33.0, 0.0005),
        spec("emotibit_P2", -0.21, 58.0, 0.0005),
        spec("emotibit_P3", 0.44, -90.0, 0.0005),
        spec("emotibit_P4", -0.88, 21.0, 0.0005),
        spec("jabra_P1", 0.12, -15.0, 0.0005),
        spec("jabra_P2", -0.33, 66.0, 0.0005),
        spec("jabra_P3", 0.57, -48.0, 0.0005),
        spec("jabra_P4", -0.71, 30.0, 0.0005),
        spec("jabra_room1", 0.26, -8.0, 0.0005),
        spec("jabra_room2", -0.49, 73.0, 0.0005),
        spec("jabra_room3", 0.61, -55.0, 0.0005),
        spec("audio_if", 0.08, 5.0, 0.0002),
    ]
}

/// The default 21 streams: 4 gaze, 4 physio, 7 video frame logs, 5 audio
/// block logs, 1 marker stream.
pub fn default_streams() -> Vec<StreamDescriptor> {
    let mut streams = Vec::new();
    let individuals = [
        (Participant::P1, "P1"),
        (Participant::P2, "P2"),
        (Participant::P3, "P3"),
        (Participant::P4, "P4"),
    ];
    for (participant, tag) in individuals {
        streams.push(StreamDescriptor {
            stream_id: format!("gaze_{tag}"),
            device_id: format!("tobii_{tag}"),
            participant,
            modality: Modality::Gaze,
            nominal_rate_hz: 100.0,
            channels: vec!["gaze_x".into(), "gaze_y".into(), "pupil_mm".into()],
        });
        streams.push(StreamDescriptor {
            stream_id: format!("physio_{tag}"),
            device_id: format!("emotibit_{tag}"),
            participant,
            modality: Modality::Physio,
            nominal_rate_hz: 25.0,
            channels: vec!["eda".into(), "ppg".into(), "temp".into()],
        });
        streams.push(StreamDescriptor {
            stream_id: format!("video_{tag}"),
            device_id: format!("jabra_{tag}"),
            participant,
            modality: Modality::VideoFrames,
            nominal_rate_hz: 30.0,
            channels: vec!["frame_dt_ms".into()],
        });
        streams.push(StreamDescriptor {
            stream_id: format!("mic_{tag}"),
            device_id: "audio_if".into(),
            participant,
            modality: Modality::AudioBlocks,
            // 48 kHz in 1024-sample blocks.
            nominal_rate_hz: 46.875,
            channels: vec!["block_peak".into(), "block_rms".into()],
        });
    }
    for k in 1..=3 {
        streams.push(StreamDescriptor {
            stream_id: format!("video_room{k}"),
            device_id: format!("jabra_room{k}"),
            participant: Participant::Room,
            modality: Modality::VideoFrames,
            nominal_rate_hz: 30.0,
            channels: vec!["frame_dt_ms".into()],
        });
    }
    streams.push(StreamDescriptor {
        stream_id: "mic_room".into(),
        device_id: "audio_if".into(),
        participant: Participant::Room,
        modality: Modality::AudioBlocks,
        nominal_rate_hz: 46.875,
        channels: vec!["block_peak".into(), "block_rms".into()],
    });
    streams.push(StreamDescriptor {
        stream_id: "markers_room".into(),
        device_id: "host".into(),
        participant: Participant::Room,
        modality: Modality::Markers,
        nominal_rate_hz: 1.0,
        channels: vec!["marker".into()],
    });
    streams.sort_by(|a, b| a.stream_id.cmp(&b.stream_id));
    streams
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    State(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Qc(#[from] QcError),
    #[error(transparent)]
    Package(#[from] PackageError),
}

impl PipelineError {
    /// Exit-code contract: 64 for configuration problems, 74 for I/O and
    /// state problems (QC verdicts use 0/1/2 separately).
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Scenario(_) | PipelineError::Sim(_) => 64,
            PipelineError::Qc(_) => 64,
            PipelineError::Fit(_) | PipelineError::State(_) | PipelineError::Package(_) => 74,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.session_id.is_empty() {
            return Err(PipelineError::Config("session_id must not be empty".into()));
        }
        let mut device_ids: Vec<&str> = self.devices.iter().map(|d| d.device_id.as_str()).collect();
        device_ids.sort_unstable();
        if device_ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(PipelineError::Config("duplicate device ids".into()));
        }
        let mut stream_ids: Vec<&str> = self.streams.iter().map(|s| s.stream_id.as_str()).collect();
        stream_ids.sort_unstable();
        if stream_ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(PipelineError::Config("duplicate stream ids".into()));
        }
        for stream in &self.streams {
            if !self.devices.iter().any(|d| d.device_id == stream.device_id) {
                return Err(PipelineError::Config(format!(
                    "stream {} references unknown device {}",
                    stream.stream_id, stream.device_id
                )));
            }
        }
        for missing in &self.faults.missing_streams {
            if !self.streams.iter().any(|s| &s.stream_id == missing) {
                return Err(PipelineError::Config(format!(
                    "faults.missing_streams names unknown stream {missing}"
                )));
            }
        }
        if !(self.anchor_pulse_period_s > 0.0) || !(self.frame_anchor_period_s > 0.0) {
            return Err(PipelineError::Config("anchor cadences must be positive".into()));
        }
        if !(self.tolerance_s > 0.0) {
            return Err(PipelineError::Config(format!(
                "tolerance_s must be positive, got {}",
                self.tolerance_s
            )));
        }
        Ok(())
    }

    fn truth_for(&self, device: &DeviceSpec) -> GroundTruthClock {
        GroundTruthClock {
            device_id: device.device_id.clone(),
            true_offset_s: device.true_offset_s,
            true_drift_ppm: device.true_drift_ppm,
            jitter_sigma_s: device.jitter_sigma_s,
            seed: derive_seed(self.master_seed, &format!("device:{}", device.device_id)),
        }
    }

    /// All ground-truth clocks, keyed and ordered by device id.
    pub fn truths(&self) -> BTreeMap<String, GroundTruthClock> {
        self.devices
            .iter()
            .map(|d| (d.device_id.clone(), self.truth_for(d)))
            .collect()
    }

    pub fn load_scenario(&self) -> Result<Scenario, PipelineError> {
        match &self.scenario {
            ScenarioSource::Default => Ok(default_scenario()),
            ScenarioSource::Path(path) => {
                let scenario: Scenario = jsonio::read_json(path).map_err(|e| {
                    PipelineError::Config(format!("cannot load scenario: {e}"))
                })?;
                Ok(scenario)
            }
        }
    }

    /// SHA-256 of the canonical JSON form of this (effective) config.
    pub fn sha256_hex(&self) -> String {
        let text = jsonio::to_canonical_json(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        hex::encode(hasher.finalize())
    }

    pub fn provenance(&self) -> ProvenanceInfo {
        ProvenanceInfo {
            tool: "meetsim".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            master_seed: self.master_seed,
            config_sha256_hex: self.sha256_hex(),
        }
    }
}

/// Load a config file (or the default when `path` is `None`).
pub fn load_config(path: Option<&Path>) -> Result<PipelineConfig, PipelineError> {
    let config = match path {
        None => PipelineConfig::default(),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                PipelineError::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            serde_json::from_str(&text).map_err(|e| {
                PipelineError::Config(format!("cannot parse config {}: {e}", path.display()))
            })?
        }
    };
    config.validate()?;
    Ok(config)
}

/// Everything the simulation stage produces, before alignment.
pub struct Simulation {
    pub scenario: Scenario,
    pub events: Vec<EventRecord>,
    pub streams: Vec<SimulatedStream>,
    pub anchors: Vec<TimeAnchor>,
    pub fault_log: FaultLog,
    pub audio: BTreeMap<String, AudioClip>,
    pub session_end_s: f64,
}

fn quantize_i16(x: f64) -> i16 {
    (x * 32767.0).round().clamp(-32768.0, 32767.0) as i16
}

fn synth_audio_clip(config: &AudioSimConfig, master_seed: u64, stream_id: &str) -> AudioClip {
    let rate = config.sample_rate_hz as f64;
    let noise_n = (config.noise_s * rate).round() as usize;
    let tone_n = (config.tone_s * rate).round() as usize;
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(master_seed, &format!("audio:{stream_id}")));
    let noise = Normal::new(0.0, config.noise_sigma).expect("finite sigma");
    let mut samples = Vec::with_capacity(noise_n + tone_n);
    for _ in 0..noise_n {
        samples.push(quantize_i16(noise.sample(&mut rng)));
    }
    for k in 0..tone_n {
        let t = k as f64 / rate;
        let x = config.tone_amplitude * (std::f64::consts::TAU * config.tone_freq_hz * t).sin();
        samples.push(quantize_i16(x));
    }
    AudioClip {
        sample_rate_hz: config.sample_rate_hz,
        samples,
    }
}

/// Stage 1: run the scenario, schedule prompts, generate every stream,
/// observe anchor pulses, and inject configured faults.
pub fn compute_simulation(config: &PipelineConfig) -> Result<Simulation, PipelineError> {
    config.validate()?;
    let scenario = config.load_scenario()?;
    let spine = run_scenario(&scenario, &config.untimed_durations, config.gap_between_blocks_s)?;
    let prompts = schedule_prompts(&scenario, &spine, &config.prompts)?;
    let events = merge_into_spine(spine, prompts);
    let session_end_s = events
        .iter()
        .find(|e| e.event_type == EVENT_SESSION_END)
        .map(|e| e.onset_s)
        .ok_or_else(|| PipelineError::State("spine has no session_end event".into()))?;

    let truths = config.truths();
    let mut streams = Vec::new();
    for descriptor in &config.streams {
        if config.faults.missing_streams.contains(&descriptor.stream_id) {
            continue;
        }
        let truth = truths
            .get(&descriptor.device_id)
            .expect("validated: stream devices exist");
        let samples =
            generate_stream(descriptor, truth, (0.0, session_end_s), config.master_seed)?;
        streams.push(SimulatedStream {
            descriptor: descriptor.clone(),
            truth: truth.clone(),
            samples,
        });
    }

    let anchored: Vec<GroundTruthClock> = truths
        .values()
        .filter(|t| !config.faults.anchorless_devices.contains(&t.device_id))
        .cloned()
        .collect();
    let video_devices: Vec<GroundTruthClock> = anchored
        .iter()
        .filter(|t| {
            config
                .streams
                .iter()
                .any(|s| s.device_id == t.device_id && s.modality == Modality::VideoFrames)
        })
        .cloned()
        .collect();

    let pulse_grid = |period: f64| -> Vec<f64> {
        let mut times = Vec::new();
        let mut t = 0.0;
        while t <= session_end_s {
            times.push(t);
            t += period;
        }
        times
    };
    let mut anchors = emit_anchor_pulses(&pulse_grid(config.anchor_pulse_period_s), &anchored, AnchorTier::Lsl)?;
    anchors.extend(emit_anchor_pulses(
        &pulse_grid(config.frame_anchor_period_s),
        &video_devices,
        AnchorTier::FrameLog,
    )?);
    let sidecar_times: Vec<f64> = match config.sidecar_anchors_per_device {
        0 => Vec::new(),
        1 => vec![0.0],
        n => (0..n)
            .map(|k| session_end_s * k as f64 / (n - 1) as f64)
            .collect(),
    };
    anchors.extend(emit_anchor_pulses(&sidecar_times, &anchored, AnchorTier::Sidecar)?);

    let (streams, anchors, fault_log) = inject_faults(
        streams,
        anchors,
        &config.faults,
        config.master_seed,
        (0.0, session_end_s),
    )?;

    let mut audio = BTreeMap::new();
    for descriptor in &config.streams {
        if descriptor.modality == Modality::AudioBlocks
            && !config.faults.missing_streams.contains(&descriptor.stream_id)
        {
            audio.insert(
                descriptor.stream_id.clone(),
                synth_audio_clip(&config.audio, config.master_seed, &descriptor.stream_id),
            );
        }
    }

    Ok(Simulation {
        scenario,
        events,
        streams,
        anchors,
        fault_log,
        audio,
        session_end_s,
    })
}

/// Recovered clock models for every configured device, plus the validation
/// report and any tier demotions the repair step performed.
pub struct DeviceFits {
    pub models: BTreeMap<String, ClockModel>,
    pub timing: TimingReport,
    pub demotions: Vec<String>,
}

/// Stage 2: recover one clock model per configured device, with tier
/// demotion repair, and validate the result.
pub fn fit_all_devices(
    config: &PipelineConfig,
    anchors: &[TimeAnchor],
) -> Result<DeviceFits, PipelineError> {
    let pool = AnchorPool::from_anchors(anchors.iter().cloned());
    let mut models = BTreeMap::new();
    let mut demotions = Vec::new();
    for device in &config.devices {
        let (model, log) =
            fit_device_with_repair(&device.device_id, &pool, &config.fit, config.tolerance_s)?;
        demotions.extend(log);
        models.insert(device.device_id.clone(), model);
    }
    let timing = validate_session_alignment(&models, &pool, config.tolerance_s)?;
    Ok(DeviceFits {
        models,
        timing,
        demotions,
    })
}

/// Stage 3: align every stream and assemble the canonical in-memory bundle.
/// Timestamps and values carried by canonical TSV files are quantized to
/// their 6-decimal file form here, so in-memory data and re-read data agree.
pub fn build_bundle(
    config: &PipelineConfig,
    sim: Simulation,
    models: BTreeMap<String, ClockModel>,
    timing: TimingReport,
) -> Result<SessionBundle, PipelineError> {
    let mut streams = BTreeMap::new();
    for stream in sim.streams {
        let id = stream.descriptor.stream_id.clone();
        let model = models
            .get(&stream.descriptor.device_id)
            .cloned()
            .ok_or_else(|| {
                PipelineError::State(format!(
                    "no clock model for device {} (stream {id})",
                    stream.descriptor.device_id
                ))
            })?;
        let aligned = if model.is_unaligned() {
            Vec::new()
        } else {
            align_stream(&id, &stream.samples, &model)?
                .into_iter()
                .map(|mut s| {
                    s.t_auth_s = quantize_seconds(s.t_auth_s);
                    for v in &mut s.values {
                        *v = quantize_seconds(*v);
                    }
                    s
                })
                .collect()
        };
        streams.insert(
            id,
            StreamData {
                descriptor: stream.descriptor,
                model,
                raw: stream.samples,
                aligned,
            },
        );
    }

    let events: Vec<EventRecord> = sim
        .events
        .into_iter()
        .map(|mut e| {
            e.onset_s = quantize_seconds(e.onset_s);
            e.duration_s = e.duration_s.map(quantize_seconds);
            e
        })
        .collect();

    let mut missing = config.faults.missing_streams.clone();
    missing.sort();
    missing.dedup();

    Ok(SessionBundle {
        session_id: config.session_id.clone(),
        scenario: sim.scenario,
        events,
        streams,
        missing_streams: missing,
        anchors: sim.anchors,
        models,
        timing: Some(timing),
        fault_log: Some(sim.fault_log),
        audio: sim.audio,
        qc: None,
        provenance: Some(config.provenance()),
    })
}

/// Stage 4: QC over an assembled bundle (preflight, gaps, audio, summary).
pub fn compute_qc(config: &PipelineConfig, bundle: &SessionBundle) -> Result<QcArtifacts, PipelineError> {
    let expected: Vec<String> = config.streams.iter().map(|s| s.stream_id.clone()).collect();
    let discovered: Vec<String> = bundle.streams.keys().cloned().collect();
    let preflight = qc::preflight(&expected, &discovered);

    let mut gap_streams = Vec::new();
    for (id, data) in &bundle.streams {
        let (gaps, insufficient) = qc::detect_gaps(
            &data.aligned,
            data.descriptor.nominal_rate_hz,
            config.qc.k_intervals,
        )?;
        gap_streams.push(StreamGapReport {
            stream_id: id.clone(),
            gaps,
            insufficient_data: insufficient,
        });
    }
    let gaps = GapReport { streams: gap_streams };

    let mut audio = Vec::new();
    for (id, clip) in &bundle.audio {
        let pcm: Vec<f64> = clip.samples.iter().map(|&s| s as f64 / 32768.0).collect();
        audio.push(qc::audio_metrics(
            id,
            &pcm,
            clip.sample_rate_hz as f64,
            (config.qc.noise_window[0], config.qc.noise_window[1]),
            (config.qc.signal_window[0], config.qc.signal_window[1]),
        )?);
    }

    let timing = bundle
        .timing
        .as_ref()
        .ok_or_else(|| PipelineError::State("bundle has no timing report; run align first".into()))?;
    let unaligned = bundle.unaligned_stream_ids();
    let summary = qc::session_summary(
        &bundle.session_id,
        &preflight,
        timing,
        &gaps,
        &audio,
        &unaligned,
        config.qc.max_gap_s,
    );
    Ok(QcArtifacts {
        report: QcReport { preflight, gaps, audio },
        summary,
    })
}

/// Outcome of a full pipeline run.
pub struct RunOutcome {
    pub summary: SessionSummary,
    pub manifest: SessionManifest,
    pub demotions: Vec<String>,
}

/// The whole pipeline: simulate, fit, align, package, QC. Writes the full
/// session tree and returns the summary whose status is the process exit
/// code.
pub fn run_end_to_end(config: &PipelineConfig, root: &Path) -> Result<RunOutcome, PipelineError> {
    let sim = compute_simulation(config)?;
    let DeviceFits {
        models,
        timing,
        demotions,
    } = fit_all_devices(config, &sim.anchors)?;
    let mut bundle = build_bundle(config, sim, models, timing)?;
    let qc = compute_qc(config, &bundle)?;
    bundle.qc = Some(qc);
    let manifest = packager::write_session(root, &bundle)?;
    let summary = bundle.qc.expect("just set").summary;
    Ok(RunOutcome {
        summary,
        manifest,
        demotions,
    })
}

fn ensure_fresh_root(root: &Path) -> Result<(), PipelineError> {
    if root.exists() {
        let mut entries = fs::read_dir(root)
            .map_err(|e| PipelineError::State(format!("{}: {e}", root.display())))?;
        if entries.next().is_some() {
            return Err(PackageError::RootNotEmpty(root.to_path_buf()).into());
        }
    } else {
        fs::create_dir_all(root)
            .map_err(|e| PipelineError::State(format!("{}: {e}", root.display())))?;
    }
    Ok(())
}

/// `simulate` subcommand: write the sourcedata subtree into a fresh root.
pub fn cmd_simulate(config: &PipelineConfig, root: &Path) -> Result<Simulation, PipelineError> {
    ensure_fresh_root(root)?;
    let sim = compute_simulation(config)?;
    let bundle = sourcedata_bundle(config, &sim);
    packager::write_sourcedata(root, &bundle)?;
    Ok(sim)
}

/// A bundle that carries only what sourcedata writing needs.
fn sourcedata_bundle(config: &PipelineConfig, sim: &Simulation) -> SessionBundle {
    let mut bundle = SessionBundle::minimal(&config.session_id, sim.scenario.clone(), Vec::new());
    for stream in &sim.streams {
        bundle.streams.insert(
            stream.descriptor.stream_id.clone(),
            StreamData {
                descriptor: stream.descriptor.clone(),
                model: ClockModel::unaligned(&stream.descriptor.device_id),
                raw: stream.samples.clone(),
                aligned: Vec::new(),
            },
        );
    }
    bundle.anchors = sim.anchors.clone();
    bundle.fault_log = Some(sim.fault_log.clone());
    bundle.audio = sim.audio.clone();
    bundle
}

fn read_sourcedata_anchors(root: &Path) -> Result<Vec<TimeAnchor>, PipelineError> {
    let path = root.join("sourcedata").join("anchors.tsv");
    if !path.is_file() {
        return Err(PipelineError::State(format!(
            "{} not found; run `simulate` first",
            path.display()
        )));
    }
    let text = fs::read_to_string(&path)
        .map_err(|e| PipelineError::State(format!("{}: {e}", path.display())))?;
    Ok(crate::packager::parse_anchors_text(&path, &text)?)
}

/// `align` subcommand: fit clock models from recorded anchors and write the
/// timing artifacts under derivatives/.
pub fn cmd_align(
    config: &PipelineConfig,
    root: &Path,
) -> Result<(TimingReport, Vec<String>), PipelineError> {
    let anchors = read_sourcedata_anchors(root)?;
    let fits = fit_all_devices(config, &anchors)?;
    packager::write_timing(root, &fits.models, &fits.timing)?;
    Ok((fits.timing, fits.demotions))
}

/// `package` subcommand: re-derive the spine, align recorded streams with
/// the fitted models, and write the canonical tree plus manifest.
pub fn cmd_package(config: &PipelineConfig, root: &Path) -> Result<SessionManifest, PipelineError> {
    let models_path = root.join("derivatives").join("clock_models.json");
    if !models_path.is_file() {
        return Err(PipelineError::State(format!(
            "{} not found; run `align` first",
            models_path.display()
        )));
    }
    let models: BTreeMap<String, ClockModel> = jsonio::read_json(&models_path)
        .map_err(|e| PipelineError::State(format!("{}: {e}", models_path.display())))?;
    let timing_path = root.join("derivatives").join("timing_report.json");
    let timing: TimingReport = jsonio::read_json(&timing_path)
        .map_err(|e| PipelineError::State(format!("{}: {e}", timing_path.display())))?;

    let sim = read_simulation_from_sourcedata(config, root)?;
    let bundle = build_bundle(config, sim, models, timing)?;
    packager::write_canonical(root, &bundle)?;
    Ok(packager::build_and_write_manifest(
        root,
        packager::compute_completeness(&bundle),
    )?)
}

/// Reconstruct the simulation stage's outputs from sourcedata plus the
/// (deterministic) scenario derivation. Raw files carry full precision, so
/// this is bit-identical to the in-memory simulation.
fn read_simulation_from_sourcedata(
    config: &PipelineConfig,
    root: &Path,
) -> Result<Simulation, PipelineError> {
    let scenario = config.load_scenario()?;
    let spine = run_scenario(&scenario, &config.untimed_durations, config.gap_between_blocks_s)?;
    let prompts = schedule_prompts(&scenario, &spine, &config.prompts)?;
    let events = merge_into_spine(spine, prompts);
    let session_end_s = events
        .iter()
        .find(|e| e.event_type == EVENT_SESSION_END)
        .map(|e| e.onset_s)
        .ok_or_else(|| PipelineError::State("spine has no session_end event".into()))?;

    let truths = config.truths();
    let mut streams = Vec::new();
    for descriptor in &config.streams {
        if config.faults.missing_streams.contains(&descriptor.stream_id) {
            continue;
        }
        let path = root
            .join("sourcedata")
            .join("streams")
            .join(format!("{}.tsv", descriptor.stream_id));
        if !path.is_file() {
            return Err(PipelineError::State(format!(
                "{} not found; run `simulate` first",
                path.display()
            )));
        }
        let text = fs::read_to_string(&path)
            .map_err(|e| PipelineError::State(format!("{}: {e}", path.display())))?;
        let samples = packager::parse_raw_stream_text(&path, &text, descriptor)?;
        streams.push(SimulatedStream {
            descriptor: descriptor.clone(),
            truth: truths
                .get(&descriptor.device_id)
                .expect("validated: stream devices exist")
                .clone(),
            samples,
        });
    }

    let anchors = read_sourcedata_anchors(root)?;
    let fault_path = root.join("sourcedata").join("fault_log.json");
    let fault_log: FaultLog = if fault_path.is_file() {
        jsonio::read_json(&fault_path)
            .map_err(|e| PipelineError::State(format!("{}: {e}", fault_path.display())))?
    } else {
        FaultLog::default()
    };

    let mut audio = BTreeMap::new();
    let audio_dir = root.join("sourcedata").join("audio");
    if audio_dir.is_dir() {
        let mut paths: Vec<PathBuf> = fs::read_dir(&audio_dir)
            .map_err(|e| PipelineError::State(format!("{}: {e}", audio_dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "wav"))
            .collect();
        paths.sort();
        for path in paths {
            let stream_id = path
                .file_stem()
                .expect("wav files have stems")
                .to_string_lossy()
                .to_string();
            let (sample_rate_hz, samples) =
                crate::wav::read_wav_mono16(&path).map_err(PackageError::from)?;
            audio.insert(stream_id, AudioClip { sample_rate_hz, samples });
        }
    }

    Ok(Simulation {
        scenario,
        events,
        streams,
        anchors,
        fault_log,
        audio,
        session_end_s,
    })
}

/// `qc` subcommand: QC an already-packaged tree, write the reports, refresh
/// the manifest to cover them, and return the summary.
pub fn cmd_qc(config: &PipelineConfig, root: &Path) -> Result<SessionSummary, PipelineError> {
    let read = packager::read_session(root)?;
    if read.bundle.timing.is_none() {
        return Err(PipelineError::State(
            "session has no timing report; run `align` and `package` first".into(),
        ));
    }
    let qc = compute_qc(config, &read.bundle)?;
    packager::write_qc(root, &qc)?;
    packager::build_and_write_manifest(root, read.manifest.stream_completeness)?;
    Ok(qc.summary)
}

/// `slice` subcommand: (re)write the per-task run slices of a packaged tree.
pub fn cmd_slice(root: &Path) -> Result<usize, PipelineError> {
    let read = packager::read_session(root)?;
    let slices = packager::write_slices(root, &read.bundle)?;
    packager::build_and_write_manifest(root, read.manifest.stream_completeness)?;
    Ok(slices.len())
}
