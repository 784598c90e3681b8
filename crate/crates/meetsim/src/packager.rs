//! The BIDS-oriented session tree: writing, reading, verifying.
//!
//! Layout (session-rooted; one group session spans four participants):
//!
//! ```text
//! root/
//!   dataset_description.json
//!   manifest.json
//!   provenance.json                  (when present in the bundle)
//!   scenario.json
//!   ses-<S>_events.tsv
//!   sub-<P>/<modality>/sub-<P>_<modality>_<stream>.tsv  (+ .json sidecar)
//!   room/<modality>/room_<modality>_<stream>.tsv        (+ .json sidecar)
//!   sourcedata/
//!     streams/<stream>.tsv           raw device-clock records, untouched
//!     anchors.tsv
//!     fault_log.json                 (when present)
//!     audio/<stream>.wav
//!   derivatives/
//!     clock_models.json
//!     timing_report.json             (when present)
//!     participant_mapping.tsv
//!     slices/slices.json
//!     slices/task-<T>_events.tsv
//!     qc_report.json                 (when present)
//!     session_summary.json           (when present)
//! ```
//!
//! Canonical TSV files use tab separators, `\n` line endings, `n/a` for
//! absent values and fixed 6-decimal seconds; JSON files use sorted keys.
//! These are bit-exact contracts: writing the same bundle twice yields
//! byte-identical trees, and `manifest.json` carries SHA-256 hashes of
//! every other file.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use walkdir::WalkDir;

use crate::jsonio;
use crate::qc::{QcReport, SessionSummary};
use crate::scenario::{EventRecord, Participant, Scenario, TaskId};
use crate::simdev::{FaultLog, SampleRecord, StreamDescriptor};
use crate::syncfit::AlignedSample;
use crate::timeline::{ClockModel, SourceTier, TimeAnchor, TimingReport};
use crate::tsv::{self, fmt_seconds, TsvError, NA};
use crate::wav::{self, WavError};

pub const EVENTS_HEADER: [&str; 8] = [
    "onset",
    "duration",
    "task",
    "phase",
    "participant",
    "stream",
    "event_type",
    "value",
];
pub const MAPPING_HEADER: [&str; 4] = ["participant", "stream_id", "device_id", "modality"];
pub const ANCHORS_HEADER: [&str; 5] = ["device_id", "t_device_s", "t_auth_s", "tier", "weight"];

const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum PackageError {
    #[error("session root {0} exists and is not empty; refusing to overwrite")]
    RootNotEmpty(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{0} is not a session root (no manifest.json)")]
    NotASession(PathBuf),
    #[error(transparent)]
    Tsv(#[from] TsvError),
    #[error(transparent)]
    Wav(#[from] WavError),
    #[error("task {task} is missing its {which} boundary event")]
    MissingBlockBoundary { task: TaskId, which: &'static str },
    #[error("event references stream {0}, which is neither packaged nor listed as missing")]
    UnknownStreamRef(String),
    #[error("{0}")]
    Structural(String),
}

impl PackageError {
    fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        PackageError::Io {
            path: path.into(),
            source,
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), PackageError> {
    fs::write(path, bytes).map_err(|e| PackageError::io(path, e))
}

fn create_dir_all(path: &Path) -> Result<(), PackageError> {
    fs::create_dir_all(path).map_err(|e| PackageError::io(path, e))
}

fn read_to_string(path: &Path) -> Result<String, PackageError> {
    fs::read_to_string(path).map_err(|e| PackageError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PackageError> {
    jsonio::write_json(path, value).map_err(|e| PackageError::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PackageError> {
    jsonio::read_json(path).map_err(|e| PackageError::io(path, e))
}

/// Completeness of one stream relative to the session plan.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Completeness {
    Present,
    Missing,
    Partial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub relative_path: String,
    pub byte_size: u64,
    pub sha256_hex: String,
}

/// File inventory plus per-stream completeness (`manifest.json`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub entries: Vec<ManifestEntry>,
    pub stream_completeness: BTreeMap<String, Completeness>,
    pub created_with: String,
}

/// Tool identity recorded in manifests and dataset metadata.
pub fn tool_version_string() -> String {
    format!("meetsim {}", env!("CARGO_PKG_VERSION"))
}

/// Run provenance (`provenance.json`): enough to reproduce the session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceInfo {
    pub tool: String,
    pub version: String,
    pub master_seed: u64,
    pub config_sha256_hex: String,
}

/// Dataset-level metadata (`dataset_description.json`). Local conventions
/// are spelled out here so the tree is self-describing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescription {
    pub name: String,
    pub session_id: String,
    pub layout: String,
    pub authoritative_timebase: String,
    pub sidecar_convention: String,
    pub generated_by: String,
}

impl DatasetDescription {
    pub fn for_session(session_id: &str) -> Self {
        DatasetDescription {
            name: "meetsim simulated group session".into(),
            session_id: session_id.to_string(),
            layout: "session-rooted BIDS-oriented tree; one session folder spans all four participants".into(),
            authoritative_timebase:
                "protocol-event host clock; all times are seconds relative to session_start".into(),
            sidecar_convention:
                "per-stream JSON sidecars carry the stream descriptor, fitted clock model and anchor tier".into(),
            generated_by: tool_version_string(),
        }
    }
}

/// Per-stream sidecar content.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSidecar {
    pub descriptor: StreamDescriptor,
    pub clock_model: ClockModel,
    pub tier: SourceTier,
}

/// One stream inside a session bundle: its descriptor, the clock model used
/// to align it, the untouched raw records and the aligned records.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamData {
    pub descriptor: StreamDescriptor,
    pub model: ClockModel,
    pub raw: Vec<SampleRecord>,
    pub aligned: Vec<AlignedSample>,
}

/// PCM audio captured alongside a stream, preserved under sourcedata.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub sample_rate_hz: u32,
    pub samples: Vec<i16>,
}

/// QC outputs carried by a finished bundle.
#[derive(Clone, Debug, PartialEq)]
pub struct QcArtifacts {
    pub report: QcReport,
    pub summary: SessionSummary,
}

/// Everything one session holds in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionBundle {
    pub session_id: String,
    pub scenario: Scenario,
    pub events: Vec<EventRecord>,
    pub streams: BTreeMap<String, StreamData>,
    /// Streams that were expected but never produced.
    pub missing_streams: Vec<String>,
    pub anchors: Vec<TimeAnchor>,
    pub models: BTreeMap<String, ClockModel>,
    pub timing: Option<TimingReport>,
    pub fault_log: Option<FaultLog>,
    pub audio: BTreeMap<String, AudioClip>,
    pub qc: Option<QcArtifacts>,
    pub provenance: Option<ProvenanceInfo>,
}

impl SessionBundle {
    /// Minimal bundle: a session id, a scenario and its event spine.
    pub fn minimal(session_id: &str, scenario: Scenario, events: Vec<EventRecord>) -> Self {
        SessionBundle {
            session_id: session_id.to_string(),
            scenario,
            events,
            streams: BTreeMap::new(),
            missing_streams: Vec::new(),
            anchors: Vec::new(),
            models: BTreeMap::new(),
            timing: None,
            fault_log: None,
            audio: BTreeMap::new(),
            qc: None,
            provenance: None,
        }
    }

    pub fn validate(&self) -> Result<(), PackageError> {
        if self.session_id.is_empty()
            || !self
                .session_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return Err(PackageError::Structural(format!(
                "session id {:?} must be non-empty and [A-Za-z0-9_-]",
                self.session_id
            )));
        }
        for event in &self.events {
            if let Some(stream) = &event.stream {
                if !self.streams.contains_key(stream)
                    && !self.missing_streams.contains(stream)
                {
                    return Err(PackageError::UnknownStreamRef(stream.clone()));
                }
            }
        }
        for (id, data) in &self.streams {
            if *id != data.descriptor.stream_id {
                return Err(PackageError::Structural(format!(
                    "stream map key {id} does not match descriptor id {}",
                    data.descriptor.stream_id
                )));
            }
            if data.descriptor.participant == Participant::Group {
                return Err(PackageError::Structural(format!(
                    "stream {id}: streams must belong to P1..P4 or room, not group"
                )));
            }
        }
        Ok(())
    }

    /// Per-task run window and sample ranges; see [`slice_runs`].
    pub fn unaligned_stream_ids(&self) -> Vec<String> {
        self.streams
            .values()
            .filter(|s| s.model.is_unaligned())
            .map(|s| s.descriptor.stream_id.clone())
            .collect()
    }
}

pub fn events_filename(session_id: &str) -> String {
    format!("ses-{session_id}_events.tsv")
}

fn option_str<T: ToString>(value: &Option<T>) -> String {
    value.as_ref().map(|v| v.to_string()).unwrap_or_else(|| NA.to_string())
}

fn render_events(events: &[EventRecord]) -> String {
    tsv::render_tsv(&EVENTS_HEADER, events, |out, e| {
        let duration = e.duration_s.map(fmt_seconds).unwrap_or_else(|| NA.to_string());
        tsv::push_row(
            out,
            &[
                &fmt_seconds(e.onset_s),
                &duration,
                &option_str(&e.task),
                &option_str(&e.phase),
                &option_str(&e.participant),
                &option_str(&e.stream),
                &e.event_type,
                &option_str(&e.value),
            ],
        );
    })
}

fn parse_events(path: &Path, text: &str) -> Result<Vec<EventRecord>, PackageError> {
    let file = tsv::parse_tsv(path, text)?;
    file.expect_header(&EVENTS_HEADER)?;
    let mut events = Vec::with_capacity(file.rows.len());
    for (line, fields) in &file.rows {
        let opt = |s: &str| if s == NA { None } else { Some(s.to_string()) };
        let onset_s = file.parse_f64(*line, &fields[0], "onset")?;
        let duration_s = match fields[1].as_str() {
            NA => None,
            s => Some(file.parse_f64(*line, s, "duration")?),
        };
        let task = match fields[2].as_str() {
            NA => None,
            s => Some(
                TaskId::parse(s).ok_or_else(|| file.invalid_field(*line, "task", s))?,
            ),
        };
        let participant = match fields[4].as_str() {
            NA => None,
            s => Some(
                Participant::parse(s)
                    .ok_or_else(|| file.invalid_field(*line, "participant", s))?,
            ),
        };
        events.push(EventRecord {
            onset_s,
            duration_s,
            task,
            phase: opt(&fields[3]),
            participant,
            stream: opt(&fields[5]),
            event_type: fields[6].clone(),
            value: opt(&fields[7]),
        });
    }
    Ok(events)
}

fn render_anchors(anchors: &[TimeAnchor]) -> String {
    tsv::render_tsv(&ANCHORS_HEADER, anchors, |out, a| {
        tsv::push_row(
            out,
            &[
                &a.device_id,
                &a.t_device_s.to_string(),
                &a.t_auth_s.to_string(),
                a.tier.as_str(),
                &a.weight.to_string(),
            ],
        );
    })
}

/// Parse a sourcedata anchors file (exposed for the staged CLI pipeline).
pub fn parse_anchors_text(path: &Path, text: &str) -> Result<Vec<TimeAnchor>, PackageError> {
    parse_anchors(path, text)
}

/// Parse a sourcedata raw stream file (exposed for the staged CLI pipeline).
pub fn parse_raw_stream_text(
    path: &Path,
    text: &str,
    descriptor: &StreamDescriptor,
) -> Result<Vec<SampleRecord>, PackageError> {
    parse_raw_stream(path, text, descriptor)
}

fn parse_anchors(path: &Path, text: &str) -> Result<Vec<TimeAnchor>, PackageError> {
    let file = tsv::parse_tsv(path, text)?;
    file.expect_header(&ANCHORS_HEADER)?;
    let mut anchors = Vec::with_capacity(file.rows.len());
    for (line, fields) in &file.rows {
        let tier = crate::timeline::AnchorTier::parse(&fields[3])
            .ok_or_else(|| file.invalid_field(*line, "tier", &fields[3]))?;
        anchors.push(TimeAnchor {
            device_id: fields[0].clone(),
            t_device_s: file.parse_f64(*line, &fields[1], "t_device_s")?,
            t_auth_s: file.parse_f64(*line, &fields[2], "t_auth_s")?,
            tier,
            weight: file.parse_f64(*line, &fields[4], "weight")?,
        });
    }
    Ok(anchors)
}

/// Raw stream rows keep full `f64` round-trip precision; they are the
/// simulator's vendor-format stand-in and must survive read -> write
/// byte-identically.
fn render_raw_stream(descriptor: &StreamDescriptor, samples: &[SampleRecord]) -> String {
    let mut header: Vec<&str> = vec!["t_device"];
    header.extend(descriptor.channels.iter().map(String::as_str));
    tsv::render_tsv(&header, samples, |out, s| {
        out.push_str(&s.t_device_s.to_string());
        for v in &s.values {
            out.push('\t');
            out.push_str(&v.to_string());
        }
    })
}

fn parse_raw_stream(
    path: &Path,
    text: &str,
    descriptor: &StreamDescriptor,
) -> Result<Vec<SampleRecord>, PackageError> {
    let file = tsv::parse_tsv(path, text)?;
    let mut expected: Vec<&str> = vec!["t_device"];
    expected.extend(descriptor.channels.iter().map(String::as_str));
    file.expect_header(&expected)?;
    let mut samples = Vec::with_capacity(file.rows.len());
    for (line, fields) in &file.rows {
        let t_device_s = file.parse_f64(*line, &fields[0], "t_device")?;
        let mut values = Vec::with_capacity(fields.len() - 1);
        for field in &fields[1..] {
            values.push(file.parse_f64(*line, field, "value")?);
        }
        samples.push(SampleRecord { t_device_s, values });
    }
    Ok(samples)
}

fn render_aligned_stream(descriptor: &StreamDescriptor, samples: &[AlignedSample]) -> String {
    let mut header: Vec<&str> = vec!["t_auth"];
    header.extend(descriptor.channels.iter().map(String::as_str));
    tsv::render_tsv(&header, samples, |out, s| {
        out.push_str(&fmt_seconds(s.t_auth_s));
        for v in &s.values {
            out.push('\t');
            out.push_str(&fmt_seconds(*v));
        }
    })
}

fn parse_aligned_stream(
    path: &Path,
    text: &str,
    descriptor: &StreamDescriptor,
) -> Result<Vec<AlignedSample>, PackageError> {
    let file = tsv::parse_tsv(path, text)?;
    let mut expected: Vec<&str> = vec!["t_auth"];
    expected.extend(descriptor.channels.iter().map(String::as_str));
    file.expect_header(&expected)?;
    let mut samples = Vec::with_capacity(file.rows.len());
    for (line, fields) in &file.rows {
        let t_auth_s = file.parse_f64(*line, &fields[0], "t_auth")?;
        let mut values = Vec::with_capacity(fields.len() - 1);
        for field in &fields[1..] {
            values.push(file.parse_f64(*line, field, "value")?);
        }
        samples.push(AlignedSample { t_auth_s, values });
    }
    Ok(samples)
}

/// Directory a stream's canonical files live in.
fn stream_dir(root: &Path, descriptor: &StreamDescriptor) -> PathBuf {
    let owner = match descriptor.participant {
        Participant::Room | Participant::Group => "room".to_string(),
        p => format!("sub-{p}"),
    };
    root.join(owner).join(descriptor.modality.as_str())
}

fn stream_stem(descriptor: &StreamDescriptor) -> String {
    let owner = match descriptor.participant {
        Participant::Room | Participant::Group => "room".to_string(),
        p => format!("sub-{p}"),
    };
    format!("{owner}_{}_{}", descriptor.modality, descriptor.stream_id)
}

/// Write the sourcedata subtree: raw streams, anchors, fault log, audio.
pub fn write_sourcedata(root: &Path, bundle: &SessionBundle) -> Result<(), PackageError> {
    let source = root.join("sourcedata");
    create_dir_all(&source.join("streams"))?;
    for data in bundle.streams.values() {
        let path = source
            .join("streams")
            .join(format!("{}.tsv", data.descriptor.stream_id));
        write_file(&path, render_raw_stream(&data.descriptor, &data.raw).as_bytes())?;
    }
    write_file(
        &source.join("anchors.tsv"),
        render_anchors(&bundle.anchors).as_bytes(),
    )?;
    if let Some(log) = &bundle.fault_log {
        write_json(&source.join("fault_log.json"), log)?;
    }
    if !bundle.audio.is_empty() {
        let audio_dir = source.join("audio");
        create_dir_all(&audio_dir)?;
        for (stream_id, clip) in &bundle.audio {
            wav::write_wav_mono16(
                &audio_dir.join(format!("{stream_id}.wav")),
                clip.sample_rate_hz,
                &clip.samples,
            )?;
        }
    }
    Ok(())
}

/// Write the canonical (non-sourcedata) tree: metadata, event spine,
/// aligned streams with sidecars, mapping, slices, timing, QC, provenance.
/// Does not write the manifest.
pub fn write_canonical(root: &Path, bundle: &SessionBundle) -> Result<(), PackageError> {
    bundle.validate()?;
    create_dir_all(root)?;
    write_json(
        &root.join("dataset_description.json"),
        &DatasetDescription::for_session(&bundle.session_id),
    )?;
    write_json(&root.join("scenario.json"), &bundle.scenario)?;
    if let Some(provenance) = &bundle.provenance {
        write_json(&root.join("provenance.json"), provenance)?;
    }
    write_file(
        &root.join(events_filename(&bundle.session_id)),
        render_events(&bundle.events).as_bytes(),
    )?;

    for data in bundle.streams.values() {
        let dir = stream_dir(root, &data.descriptor);
        create_dir_all(&dir)?;
        let stem = stream_stem(&data.descriptor);
        write_file(
            &dir.join(format!("{stem}.tsv")),
            render_aligned_stream(&data.descriptor, &data.aligned).as_bytes(),
        )?;
        write_json(
            &dir.join(format!("{stem}.json")),
            &StreamSidecar {
                descriptor: data.descriptor.clone(),
                clock_model: data.model.clone(),
                tier: data.model.source_tier,
            },
        )?;
    }

    let derivatives = root.join("derivatives");
    create_dir_all(&derivatives)?;
    if !bundle.models.is_empty() {
        write_json(&derivatives.join("clock_models.json"), &bundle.models)?;
    }
    if let Some(timing) = &bundle.timing {
        write_json(&derivatives.join("timing_report.json"), timing)?;
    }
    write_participant_mapping(root, bundle)?;
    write_slices(root, bundle)?;
    if let Some(qc) = &bundle.qc {
        write_qc(root, qc)?;
    }
    Ok(())
}

/// Write QC artifacts under derivatives/.
pub fn write_qc(root: &Path, qc: &QcArtifacts) -> Result<(), PackageError> {
    let derivatives = root.join("derivatives");
    create_dir_all(&derivatives)?;
    write_json(&derivatives.join("qc_report.json"), &qc.report)?;
    write_json(&derivatives.join("session_summary.json"), &qc.summary)?;
    Ok(())
}

/// Write clock models and the timing report under derivatives/.
pub fn write_timing(
    root: &Path,
    models: &BTreeMap<String, ClockModel>,
    timing: &TimingReport,
) -> Result<(), PackageError> {
    let derivatives = root.join("derivatives");
    create_dir_all(&derivatives)?;
    write_json(&derivatives.join("clock_models.json"), models)?;
    write_json(&derivatives.join("timing_report.json"), timing)?;
    Ok(())
}

/// The participant-to-signal mapping (`derivatives/participant_mapping.tsv`).
pub fn write_participant_mapping(root: &Path, bundle: &SessionBundle) -> Result<(), PackageError> {
    let mut rows: Vec<&StreamDescriptor> = bundle.streams.values().map(|d| &d.descriptor).collect();
    rows.sort_by(|a, b| {
        a.participant
            .cmp(&b.participant)
            .then_with(|| a.stream_id.cmp(&b.stream_id))
    });
    let text = tsv::render_tsv(&MAPPING_HEADER, rows, |out, d| {
        let participant = match d.participant {
            Participant::Group | Participant::Room => Participant::Room,
            p => p,
        };
        tsv::push_row(
            out,
            &[
                participant.as_str(),
                &d.stream_id,
                &d.device_id,
                d.modality.as_str(),
            ],
        );
    });
    let derivatives = root.join("derivatives");
    create_dir_all(&derivatives)?;
    write_file(&derivatives.join("participant_mapping.tsv"), text.as_bytes())
}

/// Index range of a stream's samples inside one run window (half-open).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSliceRange {
    pub start_index: usize,
    pub end_index: usize,
    pub sample_count: usize,
}

/// One per-task run window with per-stream sample ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSlice {
    pub task_id: TaskId,
    pub window_start_s: f64,
    pub window_end_s: f64,
    pub stream_ranges: BTreeMap<String, StreamSliceRange>,
}

/// Cut the session into per-task run windows, `[block_start, block_end)`
/// per task. Sample membership is half-open on authoritative time.
pub fn slice_runs(bundle: &SessionBundle) -> Result<Vec<RunSlice>, PackageError> {
    let mut present: Vec<TaskId> = Vec::new();
    for event in &bundle.events {
        if let Some(task) = event.task {
            if !present.contains(&task) {
                present.push(task);
            }
        }
    }
    present.sort();

    let mut slices = Vec::new();
    for task in present {
        let start = bundle
            .events
            .iter()
            .find(|e| e.event_type == crate::scenario::EVENT_BLOCK_START && e.task == Some(task))
            .map(|e| e.onset_s)
            .ok_or(PackageError::MissingBlockBoundary { task, which: "block_start" })?;
        let end = bundle
            .events
            .iter()
            .find(|e| e.event_type == crate::scenario::EVENT_BLOCK_END && e.task == Some(task))
            .map(|e| e.onset_s)
            .ok_or(PackageError::MissingBlockBoundary { task, which: "block_end" })?;
        let mut stream_ranges = BTreeMap::new();
        for (id, data) in &bundle.streams {
            let lo = data.aligned.partition_point(|s| s.t_auth_s < start);
            let hi = data.aligned.partition_point(|s| s.t_auth_s < end);
            stream_ranges.insert(
                id.clone(),
                StreamSliceRange {
                    start_index: lo,
                    end_index: hi,
                    sample_count: hi - lo,
                },
            );
        }
        slices.push(RunSlice {
            task_id: task,
            window_start_s: start,
            window_end_s: end,
            stream_ranges,
        });
    }
    Ok(slices)
}

/// Compute slices and write `derivatives/slices/`: the range index plus one
/// re-based event file per task.
pub fn write_slices(root: &Path, bundle: &SessionBundle) -> Result<Vec<RunSlice>, PackageError> {
    let slices = slice_runs(bundle)?;
    let dir = root.join("derivatives").join("slices");
    create_dir_all(&dir)?;
    write_json(&dir.join("slices.json"), &slices)?;
    for slice in &slices {
        let rows: Vec<EventRecord> = bundle
            .events
            .iter()
            .filter(|e| e.onset_s >= slice.window_start_s && e.onset_s < slice.window_end_s)
            .map(|e| EventRecord {
                onset_s: e.onset_s - slice.window_start_s,
                ..e.clone()
            })
            .collect();
        write_file(
            &dir.join(format!("task-{}_events.tsv", slice.task_id)),
            render_events(&rows).as_bytes(),
        )?;
    }
    Ok(slices)
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex::encode(hasher.finalize())
}

/// Hash every file under `root` (except the manifest itself) and write
/// `manifest.json`.
pub fn build_and_write_manifest(
    root: &Path,
    stream_completeness: BTreeMap<String, Completeness>,
) -> Result<SessionManifest, PackageError> {
    let mut entries = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            PackageError::io(root, io::Error::other(e))
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry
            .path()
            .strip_prefix(root)
            .expect("walked entries live under root")
            .to_string_lossy()
            .replace('\\', "/");
        if rel == MANIFEST_FILE {
            continue;
        }
        let bytes = fs::read(entry.path()).map_err(|e| PackageError::io(entry.path(), e))?;
        entries.push(ManifestEntry {
            relative_path: rel,
            byte_size: bytes.len() as u64,
            sha256_hex: sha256_hex(&bytes),
        });
    }
    entries.sort_by(|a, b| a.relative_path.cmp(&b.relative_path));
    let manifest = SessionManifest {
        entries,
        stream_completeness,
        created_with: tool_version_string(),
    };
    write_json(&root.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Completeness per stream: missing when never produced, partial when the
/// fault log shows dropouts, present otherwise.
pub fn compute_completeness(bundle: &SessionBundle) -> BTreeMap<String, Completeness> {
    let mut map = BTreeMap::new();
    for id in bundle.streams.keys() {
        let dropped = bundle
            .fault_log
            .as_ref()
            .map(|log| log.dropouts.iter().any(|d| &d.stream_id == id && d.samples_removed > 0))
            .unwrap_or(false);
        map.insert(
            id.clone(),
            if dropped { Completeness::Partial } else { Completeness::Present },
        );
    }
    for id in &bundle.missing_streams {
        map.insert(id.clone(), Completeness::Missing);
    }
    map
}

fn dir_is_empty(path: &Path) -> Result<bool, PackageError> {
    let mut entries = fs::read_dir(path).map_err(|e| PackageError::io(path, e))?;
    Ok(entries.next().is_none())
}

/// Write a complete session tree into an empty (or absent) root and return
/// the manifest covering every written file.
pub fn write_session(root: &Path, bundle: &SessionBundle) -> Result<SessionManifest, PackageError> {
    if root.exists() {
        if !root.is_dir() || !dir_is_empty(root)? {
            return Err(PackageError::RootNotEmpty(root.to_path_buf()));
        }
    } else {
        create_dir_all(root)?;
    }
    bundle.validate()?;
    write_sourcedata(root, bundle)?;
    write_canonical(root, bundle)?;
    build_and_write_manifest(root, compute_completeness(bundle))
}

/// One integrity problem found while checking files against the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegrityIssue {
    pub relative_path: String,
    pub kind: IntegrityIssueKind,
    pub detail: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegrityIssueKind {
    HashMismatch,
    MissingFile,
    UnlistedFile,
}

/// Re-hash every manifest entry and report mismatches, missing files and
/// files on disk the manifest does not know about.
pub fn verify_manifest(root: &Path) -> Result<Vec<IntegrityIssue>, PackageError> {
    let manifest_path = root.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(PackageError::NotASession(root.to_path_buf()));
    }
    let manifest: SessionManifest = read_json(&manifest_path)?;
    let mut issues = Vec::new();
    for entry in &manifest.entries {
        let path = root.join(&entry.relative_path);
        if !path.is_file() {
            issues.push(IntegrityIssue {
                relative_path: entry.relative_path.clone(),
                kind: IntegrityIssueKind::MissingFile,
                detail: "listed in manifest but absent".into(),
            });
            continue;
        }
        let bytes = fs::read(&path).map_err(|e| PackageError::io(&path, e))?;
        let actual = sha256_hex(&bytes);
        if actual != entry.sha256_hex || bytes.len() as u64 != entry.byte_size {
            issues.push(IntegrityIssue {
                relative_path: entry.relative_path.clone(),
                kind: IntegrityIssueKind::HashMismatch,
                detail: format!("expected sha256 {}, found {}", entry.sha256_hex, actual),
            });
        }
    }
    let listed: std::collections::BTreeSet<&str> = manifest
        .entries
        .iter()
        .map(|e| e.relative_path.as_str())
        .collect();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| PackageError::io(root, io::Error::other(e)))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry
            .path()
            .strip_prefix(root)
            .expect("walked entries live under root")
            .to_string_lossy()
            .replace('\\', "/");
        if rel != MANIFEST_FILE && !listed.contains(rel.as_str()) {
            issues.push(IntegrityIssue {
                relative_path: rel,
                kind: IntegrityIssueKind::UnlistedFile,
                detail: "present on disk but not in manifest".into(),
            });
        }
    }
    issues.sort_by(|a, b| a.relative_path.cmp(&b.relative_path));
    Ok(issues)
}

/// A session read back from disk: the reconstructed bundle, its manifest,
/// and any integrity issues found while checking hashes (collected, not
/// fatal).
#[derive(Clone, Debug)]
pub struct ReadSession {
    pub bundle: SessionBundle,
    pub manifest: SessionManifest,
    pub integrity_issues: Vec<IntegrityIssue>,
}

/// Read a session tree back into memory. The manifest must exist; hash
/// mismatches are surfaced in the result rather than failing the read.
pub fn read_session(root: &Path) -> Result<ReadSession, PackageError> {
    let manifest_path = root.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(PackageError::NotASession(root.to_path_buf()));
    }
    let manifest: SessionManifest = read_json(&manifest_path)?;
    let integrity_issues = verify_manifest(root)?;

    let description: DatasetDescription = read_json(&root.join("dataset_description.json"))?;
    let session_id = description.session_id;
    let scenario: Scenario = read_json(&root.join("scenario.json"))?;
    let events_path = root.join(events_filename(&session_id));
    let events = parse_events(&events_path, &read_to_string(&events_path)?)?;

    let mut streams = BTreeMap::new();
    let mut sidecar_paths: Vec<PathBuf> = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| PackageError::io(root, io::Error::other(e)))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(root).expect("under root");
        let top = rel.components().next();
        let is_stream_dir = matches!(
            top,
            Some(std::path::Component::Normal(name))
                if name.to_string_lossy().starts_with("sub-") || name == "room"
        );
        if is_stream_dir && rel.extension().is_some_and(|e| e == "json") {
            sidecar_paths.push(entry.path().to_path_buf());
        }
    }
    for sidecar_path in sidecar_paths {
        let sidecar: StreamSidecar = read_json(&sidecar_path)?;
        let stem = stream_stem(&sidecar.descriptor);
        let dir = sidecar_path.parent().expect("sidecar has a parent");
        let aligned_path = dir.join(format!("{stem}.tsv"));
        let aligned = parse_aligned_stream(
            &aligned_path,
            &read_to_string(&aligned_path)?,
            &sidecar.descriptor,
        )?;
        let raw_path = root
            .join("sourcedata")
            .join("streams")
            .join(format!("{}.tsv", sidecar.descriptor.stream_id));
        let raw = parse_raw_stream(&raw_path, &read_to_string(&raw_path)?, &sidecar.descriptor)?;
        streams.insert(
            sidecar.descriptor.stream_id.clone(),
            StreamData {
                model: sidecar.clock_model,
                descriptor: sidecar.descriptor,
                raw,
                aligned,
            },
        );
    }

    let anchors_path = root.join("sourcedata").join("anchors.tsv");
    let anchors = if anchors_path.is_file() {
        parse_anchors(&anchors_path, &read_to_string(&anchors_path)?)?
    } else {
        Vec::new()
    };

    let models_path = root.join("derivatives").join("clock_models.json");
    let models: BTreeMap<String, ClockModel> = if models_path.is_file() {
        read_json(&models_path)?
    } else {
        BTreeMap::new()
    };
    let timing_path = root.join("derivatives").join("timing_report.json");
    let timing: Option<TimingReport> = if timing_path.is_file() {
        Some(read_json(&timing_path)?)
    } else {
        None
    };
    let fault_path = root.join("sourcedata").join("fault_log.json");
    let fault_log: Option<FaultLog> = if fault_path.is_file() {
        Some(read_json(&fault_path)?)
    } else {
        None
    };

    let mut audio = BTreeMap::new();
    let audio_dir = root.join("sourcedata").join("audio");
    if audio_dir.is_dir() {
        let mut wavs: Vec<PathBuf> = fs::read_dir(&audio_dir)
            .map_err(|e| PackageError::io(&audio_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "wav"))
            .collect();
        wavs.sort();
        for path in wavs {
            let stream_id = path
                .file_stem()
                .expect("wav files have stems")
                .to_string_lossy()
                .to_string();
            let (sample_rate_hz, samples) = wav::read_wav_mono16(&path)?;
            audio.insert(stream_id, AudioClip { sample_rate_hz, samples });
        }
    }

    let qc_path = root.join("derivatives").join("qc_report.json");
    let summary_path = root.join("derivatives").join("session_summary.json");
    let qc = if qc_path.is_file() && summary_path.is_file() {
        Some(QcArtifacts {
            report: read_json(&qc_path)?,
            summary: read_json(&summary_path)?,
        })
    } else {
        None
    };
    let provenance_path = root.join("provenance.json");
    let provenance: Option<ProvenanceInfo> = if provenance_path.is_file() {
        Some(read_json(&provenance_path)?)
    } else {
        None
    };

    let missing_streams: Vec<String> = manifest
        .stream_completeness
        .iter()
        .filter(|(_, c)| **c == Completeness::Missing)
        .map(|(id, _)| id.clone())
        .collect();

    Ok(ReadSession {
        bundle: SessionBundle {
            session_id,
            scenario,
            events,
            streams,
            missing_streams,
            anchors,
            models,
            timing,
            fault_log,
            audio,
            qc,
            provenance,
        },
        manifest,
        integrity_issues,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{default_scenario, run_scenario};
    use crate::tsv::quantize_seconds;

    fn minimal_bundle() -> SessionBundle {
        let scenario = default_scenario();
        let mut untimed = BTreeMap::new();
        untimed.insert("settlement_form".to_string(), 120.0);
        let events = run_scenario(&scenario, &untimed, 0.0).unwrap();
        SessionBundle::minimal("001", scenario, events)
    }

    #[test]
    fn minimal_bundle_writes_required_files() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("ses");
        let manifest = write_session(&root, &minimal_bundle()).unwrap();
        assert!(root.join("ses-001_events.tsv").is_file());
        assert!(root.join("dataset_description.json").is_file());
        assert!(root.join("manifest.json").is_file());
        assert!(manifest
            .entries
            .iter()
            .any(|e| e.relative_path == "ses-001_events.tsv"));
    }

    #[test]
    fn write_refuses_non_empty_root() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("ses");
        fs::create_dir_all(&root).unwrap();
        fs::write(root.join("junk.txt"), b"x").unwrap();
        assert!(matches!(
            write_session(&root, &minimal_bundle()),
            Err(PackageError::RootNotEmpty(_))
        ));
    }

    #[test]
    fn same_bundle_twice_gives_identical_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = minimal_bundle();
        let m1 = write_session(&dir.path().join("a"), &bundle).unwrap();
        let m2 = write_session(&dir.path().join("b"), &bundle).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn events_round_trip_field_by_field() {
        let bundle = minimal_bundle();
        let text = render_events(&bundle.events);
        let parsed = parse_events(Path::new("events.tsv"), &text).unwrap();
        // Spine onsets are whole-ish numbers, so quantization is exact here.
        let expect: Vec<EventRecord> = bundle
            .events
            .iter()
            .map(|e| EventRecord {
                onset_s: quantize_seconds(e.onset_s),
                duration_s: e.duration_s.map(quantize_seconds),
                ..e.clone()
            })
            .collect();
        assert_eq!(parsed, expect);
    }

    #[test]
    fn events_header_is_exact() {
        let text = render_events(&[]);
        assert!(text.starts_with(
            "onset\tduration\ttask\tphase\tparticipant\tstream\tevent_type\tvalue\n"
        ));
    }

    #[test]
    fn non_numeric_onset_is_a_parse_error_with_line() {
        let text = "onset\tduration\ttask\tphase\tparticipant\tstream\tevent_type\tvalue\nabc\tn/a\tn/a\tn/a\tn/a\tn/a\tx\tn/a\n";
        let err = parse_events(Path::new("events.tsv"), text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("events.tsv:2"), "message was {msg}");
        assert!(msg.contains("onset"));
    }

    #[test]
    fn read_back_equals_written_bundle() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("ses");
        let mut bundle = minimal_bundle();
        for e in &mut bundle.events {
            e.onset_s = quantize_seconds(e.onset_s);
            e.duration_s = e.duration_s.map(quantize_seconds);
        }
        write_session(&root, &bundle).unwrap();
        let read = read_session(&root).unwrap();
        assert!(read.integrity_issues.is_empty());
        assert_eq!(read.bundle, bundle);
    }

    #[test]
    fn flipped_byte_is_detected_and_named() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("ses");
        write_session(&root, &minimal_bundle()).unwrap();
        let victim = root.join("ses-001_events.tsv");
        let mut bytes = fs::read(&victim).unwrap();
        let last = bytes.len() - 2;
        bytes[last] ^= 0x01;
        fs::write(&victim, bytes).unwrap();
        let issues = verify_manifest(&root).unwrap();
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].relative_path, "ses-001_events.tsv");
        assert_eq!(issues[0].kind, IntegrityIssueKind::HashMismatch);
        // read_session still succeeds and surfaces the same issue.
        let read = read_session(&root).unwrap();
        assert_eq!(read.integrity_issues.len(), 1);
    }

    #[test]
    fn missing_manifest_is_not_a_session() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            read_session(dir.path()),
            Err(PackageError::NotASession(_))
        ));
    }

    #[test]
    fn slice_windows_follow_block_boundaries() {
        let bundle = minimal_bundle();
        let slices = slice_runs(&bundle).unwrap();
        assert_eq!(slices.len(), 5);
        assert_eq!(slices[0].task_id, TaskId::T0);
        assert_eq!(slices[0].window_start_s, 0.0);
        assert_eq!(slices[0].window_end_s, 300.0);
        assert_eq!(slices[1].window_end_s - slices[1].window_start_s, 555.0);
    }

    #[test]
    fn slice_missing_boundary_names_task() {
        let mut bundle = minimal_bundle();
        bundle
            .events
            .retain(|e| !(e.event_type == "block_end" && e.task == Some(TaskId::T2)));
        let err = slice_runs(&bundle).unwrap_err();
        match err {
            PackageError::MissingBlockBoundary { task, which } => {
                assert_eq!(task, TaskId::T2);
                assert_eq!(which, "block_end");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn event_referencing_unknown_stream_is_rejected() {
        let mut bundle = minimal_bundle();
        bundle.events[0].stream = Some("ghost".into());
        assert!(matches!(
            bundle.validate(),
            Err(PackageError::UnknownStreamRef(s)) if s == "ghost"
        ));
        bundle.missing_streams.push("ghost".into());
        assert!(bundle.validate().is_ok());
    }

    mod round_trip {
        use super::*;
        use proptest::prelude::*;

        const PARTICIPANTS: [Participant; 6] = [
            Participant::P1,
            Participant::P2,
            Participant::P3,
            Participant::P4,
            Participant::Group,
            Participant::Room,
        ];

        proptest! {
            // One invariant instead of a hand-written encode/decode matrix:
            // any representable spine row survives render -> parse intact.
            #[test]
            fn event_rows_survive_tsv(
                onset in 0.0f64..3000.0,
                duration in proptest::option::of(0.0f64..500.0),
                task_idx in proptest::option::of(0usize..5),
                phase in proptest::option::of("[a-z_]{1,12}"),
                participant_idx in proptest::option::of(0usize..6),
                stream in proptest::option::of("[a-z0-9_]{1,12}"),
                event_type in "[a-z_]{1,16}",
                value in proptest::option::of("[a-z0-9:,.-]{1,20}"),
            ) {
                let record = EventRecord {
                    onset_s: quantize_seconds(onset),
                    duration_s: duration.map(quantize_seconds),
                    task: task_idx.map(|i| TaskId::ALL[i]),
                    phase,
                    participant: participant_idx.map(|i| PARTICIPANTS[i]),
                    stream,
                    event_type,
                    value,
                };
                let text = render_events(std::slice::from_ref(&record));
                let parsed = parse_events(Path::new("t.tsv"), &text).unwrap();
                prop_assert_eq!(parsed, vec![record]);
            }
        }
    }
}
