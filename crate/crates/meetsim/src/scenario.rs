//! The five-block session protocol as data, the state machine that turns it
//! into the authoritative event spine, and the self-report prompt scheduler.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

/// Task block identifier, fixed order `T0..T4` in the default protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskId {
    T0,
    T1,
    T2,
    T3,
    T4,
}

impl TaskId {
    pub const ALL: [TaskId; 5] = [TaskId::T0, TaskId::T1, TaskId::T2, TaskId::T3, TaskId::T4];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskId::T0 => "T0",
            TaskId::T1 => "T1",
            TaskId::T2 => "T2",
            TaskId::T3 => "T3",
            TaskId::T4 => "T4",
        }
    }

    pub fn parse(s: &str) -> Option<TaskId> {
        TaskId::ALL.iter().copied().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Who an event or stream belongs to. `Group` marks whole-group events,
/// `Room` marks room-level streams (overview cameras, room microphone).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Participant {
    P1,
    P2,
    P3,
    P4,
    #[serde(rename = "group")]
    Group,
    #[serde(rename = "room")]
    Room,
}

impl Participant {
    pub const INDIVIDUALS: [Participant; 4] =
        [Participant::P1, Participant::P2, Participant::P3, Participant::P4];

    pub fn as_str(&self) -> &'static str {
        match self {
            Participant::P1 => "P1",
            Participant::P2 => "P2",
            Participant::P3 => "P3",
            Participant::P4 => "P4",
            Participant::Group => "group",
            Participant::Room => "room",
        }
    }

    pub fn parse(s: &str) -> Option<Participant> {
        match s {
            "P1" => Some(Participant::P1),
            "P2" => Some(Participant::P2),
            "P3" => Some(Participant::P3),
            "P4" => Some(Participant::P4),
            "group" => Some(Participant::Group),
            "room" => Some(Participant::Room),
            _ => None,
        }
    }
}

impl fmt::Display for Participant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Phase duration: a fixed number of seconds, or untimed (moderator
/// controlled; the simulation supplies a duration from configuration).
///
/// JSON form: a number, or the string `"untimed"`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PhaseDuration {
    Timed(f64),
    Untimed,
}

impl PhaseDuration {
    pub fn is_untimed(&self) -> bool {
        matches!(self, PhaseDuration::Untimed)
    }
}

impl Serialize for PhaseDuration {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            PhaseDuration::Timed(s) => serializer.serialize_f64(*s),
            PhaseDuration::Untimed => serializer.serialize_str("untimed"),
        }
    }
}

impl<'de> Deserialize<'de> for PhaseDuration {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct DurationVisitor;

        impl<'de> Visitor<'de> for DurationVisitor {
            type Value = PhaseDuration;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a duration in seconds or the string \"untimed\"")
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Self::Value, E> {
                Ok(PhaseDuration::Timed(v))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Self::Value, E> {
                Ok(PhaseDuration::Timed(v as f64))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Self::Value, E> {
                Ok(PhaseDuration::Timed(v as f64))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Self::Value, E> {
                if v == "untimed" {
                    Ok(PhaseDuration::Untimed)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
        }

        deserializer.deserialize_any(DurationVisitor)
    }
}

/// One phase of a task block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub name: String,
    pub duration_s: PhaseDuration,
    pub prompt_eligible: bool,
    /// Event types that, when observed inside this phase, schedule an
    /// additional prompt at `trigger + trigger_latency_s`.
    #[serde(default)]
    pub trigger_events: Vec<String>,
}

impl Phase {
    fn timed(name: &str, duration_s: f64, prompt_eligible: bool) -> Phase {
        Phase {
            name: name.into(),
            duration_s: PhaseDuration::Timed(duration_s),
            prompt_eligible,
            trigger_events: Vec::new(),
        }
    }
}

/// One task block: an identifier plus its ordered phases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub task_id: TaskId,
    pub phases: Vec<Phase>,
}

/// The full session protocol as data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub blocks: Vec<Block>,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("duplicate task id {0} in scenario")]
    DuplicateTask(TaskId),
    #[error("task {task} phase {phase:?} has non-positive duration {duration_s}")]
    NonPositiveDuration {
        task: TaskId,
        phase: String,
        duration_s: f64,
    },
    #[error("untimed phase {phase:?} of task {task} has no configured duration")]
    MissingUntimedDuration { task: TaskId, phase: String },
    #[error("configured duration for untimed phase {phase:?} must be positive, got {duration_s}")]
    InvalidUntimedDuration { phase: String, duration_s: f64 },
    #[error("negative inter-block gap {0}")]
    NegativeGap(f64),
    #[error("prompt policy invalid: {0}")]
    InvalidPromptPolicy(String),
    #[error("phase_start event references unknown phase {phase:?} of task {task}")]
    UnknownPhase { task: TaskId, phase: String },
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut seen = Vec::new();
        for block in &self.blocks {
            if seen.contains(&block.task_id) {
                return Err(ScenarioError::DuplicateTask(block.task_id));
            }
            seen.push(block.task_id);
            for phase in &block.phases {
                if let PhaseDuration::Timed(d) = phase.duration_s {
                    if !(d > 0.0) {
                        return Err(ScenarioError::NonPositiveDuration {
                            task: block.task_id,
                            phase: phase.name.clone(),
                            duration_s: d,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Total timed duration of one task block, ignoring untimed phases.
    pub fn timed_block_span(&self, task: TaskId) -> f64 {
        self.blocks
            .iter()
            .filter(|b| b.task_id == task)
            .flat_map(|b| &b.phases)
            .filter_map(|p| match p.duration_s {
                PhaseDuration::Timed(d) => Some(d),
                PhaseDuration::Untimed => None,
            })
            .sum()
    }
}

/// The built-in default protocol: five blocks, timed and untimed phases.
pub fn default_scenario() -> Scenario {
    Scenario {
        blocks: vec![
            Block {
                task_id: TaskId::T0,
                phases: vec![Phase::timed("free_talk", 300.0, true)],
            },
            Block {
                task_id: TaskId::T1,
                phases: vec![
                    Phase::timed("reading", 75.0, false),
                    Phase::timed("discussion", 420.0, true),
                    Phase::timed("selection", 60.0, false),
                ],
            },
            Block {
                task_id: TaskId::T2,
                phases: vec![
                    Phase::timed("negotiation", 480.0, true),
                    Phase {
                        name: "settlement_form".into(),
                        duration_s: PhaseDuration::Untimed,
                        prompt_eligible: false,
                        trigger_events: Vec::new(),
                    },
                ],
            },
            Block {
                task_id: TaskId::T3,
                phases: vec![
                    Phase::timed("generation", 180.0, false),
                    Phase::timed("board_discussion", 420.0, true),
                    Phase::timed("selection", 60.0, false),
                ],
            },
            Block {
                task_id: TaskId::T4,
                phases: vec![
                    Phase::timed("contribution", 60.0, false),
                    Phase {
                        name: "reveal".into(),
                        duration_s: PhaseDuration::Timed(60.0),
                        prompt_eligible: true,
                        trigger_events: vec!["reveal_marker".into()],
                    },
                    Phase::timed("discussion", 180.0, true),
                ],
            },
        ],
    }
}

pub const EVENT_SESSION_START: &str = "session_start";
pub const EVENT_SESSION_END: &str = "session_end";
pub const EVENT_BLOCK_START: &str = "block_start";
pub const EVENT_BLOCK_END: &str = "block_end";
pub const EVENT_PHASE_START: &str = "phase_start";
pub const EVENT_PROMPT_VAD: &str = "prompt_vad";

/// What a `prompt_vad` event asks for: the three rated dimensions and scale.
pub const PROMPT_VAD_VALUE: &str = "valence,arousal,dominance:1-9";

/// One row of the authoritative event spine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub onset_s: f64,
    pub duration_s: Option<f64>,
    pub task: Option<TaskId>,
    pub phase: Option<String>,
    pub participant: Option<Participant>,
    pub stream: Option<String>,
    pub event_type: String,
    pub value: Option<String>,
}

impl EventRecord {
    fn marker(onset_s: f64, event_type: &str) -> EventRecord {
        EventRecord {
            onset_s,
            duration_s: None,
            task: None,
            phase: None,
            participant: None,
            stream: None,
            event_type: event_type.into(),
            value: None,
        }
    }
}

/// Total order of spine rows: onset first, then the fixed lexicographic
/// tie-break (task, phase, event_type, participant); absent fields sort
/// before present ones.
pub fn spine_order(a: &EventRecord, b: &EventRecord) -> Ordering {
    a.onset_s
        .total_cmp(&b.onset_s)
        .then_with(|| a.task.cmp(&b.task))
        .then_with(|| a.phase.cmp(&b.phase))
        .then_with(|| a.event_type.cmp(&b.event_type))
        .then_with(|| a.participant.cmp(&b.participant))
}

/// Run the protocol state machine and emit the boundary events of the spine.
///
/// Untimed phases take their duration from `untimed_durations` (keyed by
/// phase name). Blocks follow each other after `gap_between_blocks_s`.
pub fn run_scenario(
    scenario: &Scenario,
    untimed_durations: &BTreeMap<String, f64>,
    gap_between_blocks_s: f64,
) -> Result<Vec<EventRecord>, ScenarioError> {
    scenario.validate()?;
    if gap_between_blocks_s < 0.0 {
        return Err(ScenarioError::NegativeGap(gap_between_blocks_s));
    }
    // Resolve every untimed phase up front so errors name the phase before
    // any event is produced.
    for block in &scenario.blocks {
        for phase in &block.phases {
            if phase.duration_s.is_untimed() {
                match untimed_durations.get(&phase.name) {
                    None => {
                        return Err(ScenarioError::MissingUntimedDuration {
                            task: block.task_id,
                            phase: phase.name.clone(),
                        })
                    }
                    Some(d) if !(*d > 0.0) => {
                        return Err(ScenarioError::InvalidUntimedDuration {
                            phase: phase.name.clone(),
                            duration_s: *d,
                        })
                    }
                    Some(_) => {}
                }
            }
        }
    }

    let mut events = Vec::new();
    let mut cursor = 0.0f64;
    events.push(EventRecord::marker(0.0, EVENT_SESSION_START));
    for (i, block) in scenario.blocks.iter().enumerate() {
        if i > 0 {
            cursor += gap_between_blocks_s;
        }
        events.push(EventRecord {
            task: Some(block.task_id),
            ..EventRecord::marker(cursor, EVENT_BLOCK_START)
        });
        for phase in &block.phases {
            let duration = match phase.duration_s {
                PhaseDuration::Timed(d) => d,
                PhaseDuration::Untimed => untimed_durations[&phase.name],
            };
            events.push(EventRecord {
                duration_s: Some(duration),
                task: Some(block.task_id),
                phase: Some(phase.name.clone()),
                ..EventRecord::marker(cursor, EVENT_PHASE_START)
            });
            cursor += duration;
        }
        events.push(EventRecord {
            task: Some(block.task_id),
            ..EventRecord::marker(cursor, EVENT_BLOCK_END)
        });
    }
    events.push(EventRecord::marker(cursor, EVENT_SESSION_END));
    events.sort_by(spine_order);
    Ok(events)
}

/// Prompt scheduling policy for in-task self reports.
///
/// Dimensions are fixed: valence, arousal and dominance, each rated on a
/// 1-9 integer scale (see [`PROMPT_VAD_VALUE`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptPolicy {
    /// Delay from phase start to the first scheduled prompt.
    pub initial_delay_s: f64,
    /// Repeat interval after the first prompt; `None` disables repeats.
    pub periodic_s: Option<f64>,
    /// Minimum spacing between accepted prompts per participant.
    pub min_spacing_s: f64,
    /// No prompt lands within this margin of the phase end.
    pub end_guard_s: f64,
    /// Delay from a trigger event to the prompt it schedules.
    pub trigger_latency_s: f64,
}

impl Default for PromptPolicy {
    fn default() -> Self {
        PromptPolicy {
            initial_delay_s: 60.0,
            periodic_s: Some(120.0),
            min_spacing_s: 90.0,
            end_guard_s: 15.0,
            trigger_latency_s: 2.0,
        }
    }
}

impl PromptPolicy {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.min_spacing_s > 0.0) {
            return Err(ScenarioError::InvalidPromptPolicy(format!(
                "min_spacing_s must be > 0, got {}",
                self.min_spacing_s
            )));
        }
        if self.end_guard_s < 0.0 {
            return Err(ScenarioError::InvalidPromptPolicy(format!(
                "end_guard_s must be >= 0, got {}",
                self.end_guard_s
            )));
        }
        Ok(())
    }
}

/// Schedule valence-arousal-dominance prompts against an event spine.
///
/// Emits one `prompt_vad` record per participant per accepted prompt time.
/// Prompt times come from the policy (initial delay plus periodic repeats)
/// and from trigger events listed per phase; candidates violating the end
/// guard or the per-participant minimum spacing are dropped, not deferred.
pub fn schedule_prompts(
    scenario: &Scenario,
    events: &[EventRecord],
    policy: &PromptPolicy,
) -> Result<Vec<EventRecord>, ScenarioError> {
    policy.validate()?;
    let mut phase_meta: BTreeMap<(TaskId, &str), &Phase> = BTreeMap::new();
    for block in &scenario.blocks {
        for phase in &block.phases {
            phase_meta.insert((block.task_id, phase.name.as_str()), phase);
        }
    }

    let mut phase_starts: Vec<(TaskId, &str, f64, f64)> = events
        .iter()
        .filter(|e| e.event_type == EVENT_PHASE_START)
        .filter_map(|e| {
            let task = e.task?;
            let phase = e.phase.as_deref()?;
            let duration = e.duration_s?;
            Some((task, phase, e.onset_s, duration))
        })
        .collect();
    phase_starts.sort_by(|a, b| a.2.total_cmp(&b.2));

    let mut prompts = Vec::new();
    // Spacing is tracked per participant across the whole session; all
    // participants are prompted at the same times, so one tracker suffices.
    let mut last_accepted: Option<f64> = None;
    for (task, phase_name, t0, duration) in phase_starts {
        let phase = phase_meta
            .get(&(task, phase_name))
            .copied()
            .ok_or_else(|| ScenarioError::UnknownPhase {
                task,
                phase: phase_name.to_string(),
            })?;
        if !phase.prompt_eligible {
            continue;
        }
        let latest = t0 + duration - policy.end_guard_s;
        let mut candidates = Vec::new();
        let first = t0 + policy.initial_delay_s;
        if first <= latest {
            candidates.push(first);
            if let Some(period) = policy.periodic_s {
                if period > 0.0 {
                    let mut t = first + period;
                    while t <= latest {
                        candidates.push(t);
                        t += period;
                    }
                }
            }
        }
        if !phase.trigger_events.is_empty() {
            for event in events {
                if phase.trigger_events.contains(&event.event_type)
                    && event.onset_s >= t0
                    && event.onset_s < t0 + duration
                {
                    let t = event.onset_s + policy.trigger_latency_s;
                    if t >= t0 && t <= latest {
                        candidates.push(t);
                    }
                }
            }
        }
        candidates.sort_by(|a, b| a.total_cmp(b));
        for t in candidates {
            if let Some(last) = last_accepted {
                if t - last < policy.min_spacing_s {
                    continue;
                }
            }
            last_accepted = Some(t);
            for participant in Participant::INDIVIDUALS {
                prompts.push(EventRecord {
                    onset_s: t,
                    duration_s: None,
                    task: Some(task),
                    phase: Some(phase_name.to_string()),
                    participant: Some(participant),
                    stream: None,
                    event_type: EVENT_PROMPT_VAD.into(),
                    value: Some(PROMPT_VAD_VALUE.into()),
                });
            }
        }
    }
    prompts.sort_by(spine_order);
    Ok(prompts)
}

/// Merge prompt (or other) records into a spine, restoring the total order.
pub fn merge_into_spine(mut spine: Vec<EventRecord>, extra: Vec<EventRecord>) -> Vec<EventRecord> {
    spine.extend(extra);
    spine.sort_by(spine_order);
    spine
}
