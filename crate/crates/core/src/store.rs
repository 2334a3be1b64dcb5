//! Session directories on disk.
//!
//! ```text
//! <session-id>/manifest.json   session metadata and both trial schedules
//! <session-id>/events.jsonl    one header record, then one record per event
//! <session-id>/trace.csv       one row per tick, `#` metadata line first
//! <session-id>/outcomes.csv    derived per-trial outcomes (optional)
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! read-write cycle reproduces every value bit for bit. Fields this version
//! does not know about are carried along and written back unchanged.

use crate::agents::{PolicyParams, Profile};
use crate::engine::{EngineConfig, Event, PoseSample, SubjectPose};
use crate::geometry::Vec2;
use crate::scenario::{SubjectParams, TrialSpec};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const TRACE_FILE: &str = "trace.csv";
pub const OUTCOMES_FILE: &str = "outcomes.csv";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: schema version {found} is not supported (expected {expected})")]
    Incompatible {
        path: PathBuf,
        found: u64,
        expected: u32,
    },
    #[error("{path}: integrity error at byte {offset} (record {record}): {reason}")]
    Integrity {
        path: PathBuf,
        offset: u64,
        record: usize,
        reason: String,
    },
    #[error("{path}: {reason}")]
    Invalid { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    /// Obstacle-free walks used to measure preferred walking speed.
    Pws,
    Main,
}

impl Block {
    fn as_str(self) -> &'static str {
        match self {
            Block::Pws => "pws",
            Block::Main => "main",
        }
    }

    fn parse(s: &str) -> Option<Block> {
        match s {
            "pws" => Some(Block::Pws),
            "main" => Some(Block::Main),
            _ => None,
        }
    }
}

/// Who drove the subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum PolicySource {
    Synthetic {
        profile: Profile,
        params: PolicyParams,
        /// Speed the synthetic subject walks at when unobstructed.
        natural_speed: f64,
    },
    Live,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Timestamps {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_unix: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completed_unix: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub schema_version: u32,
    pub session_id: String,
    pub seed: u64,
    pub subject: SubjectParams,
    pub engine: EngineConfig,
    pub policy: PolicySource,
    pub pws_trials: Vec<TrialSpec>,
    pub trials: Vec<TrialSpec>,
    /// SHA-256 over the canonical JSON of `pws_trials` and `trials`.
    pub trial_digest: String,
    #[serde(default)]
    pub timestamps: Timestamps,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    /// Fields written by newer versions; preserved on rewrite.
    #[serde(skip)]
    pub extra: Map<String, Value>,
}

impl SessionManifest {
    pub fn compute_digest(pws_trials: &[TrialSpec], trials: &[TrialSpec]) -> String {
        let canonical = serde_json::to_vec(&(pws_trials, trials)).expect("trial specs serialize");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn digest_matches(&self) -> bool {
        self.trial_digest == Self::compute_digest(&self.pws_trials, &self.trials)
    }

    pub fn trial(&self, block: Block, trial_id: u32) -> Option<&TrialSpec> {
        let list = match block {
            Block::Pws => &self.pws_trials,
            Block::Main => &self.trials,
        };
        list.iter().find(|t| t.trial_id == trial_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredEvent {
    pub event: Event,
    pub extra: Map<String, Value>,
}

impl From<Event> for StoredEvent {
    fn from(event: Event) -> Self {
        Self {
            event,
            extra: Map::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub block: Block,
    pub spec: TrialSpec,
    pub events: Vec<StoredEvent>,
    pub samples: Vec<PoseSample>,
    /// Values of `SessionData::trace_extra_columns`, one vec per sample.
    pub sample_extras: Vec<Vec<String>>,
}

impl TrialRecord {
    pub fn new(
        block: Block,
        spec: TrialSpec,
        events: Vec<Event>,
        samples: Vec<PoseSample>,
    ) -> Self {
        Self {
            block,
            spec,
            events: events.into_iter().map(StoredEvent::from).collect(),
            samples,
            sample_extras: Vec::new(),
        }
    }

    pub fn events(&self) -> impl Iterator<Item = &Event> {
        self.events.iter().map(|e| &e.event)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionData {
    pub manifest: SessionManifest,
    pub trials: Vec<TrialRecord>,
    pub trace_extra_columns: Vec<String>,
}

impl SessionData {
    pub fn new(manifest: SessionManifest, trials: Vec<TrialRecord>) -> Self {
        Self {
            manifest,
            trials,
            trace_extra_columns: Vec::new(),
        }
    }

    pub fn block(&self, block: Block) -> impl Iterator<Item = &TrialRecord> {
        self.trials.iter().filter(move |t| t.block == block)
    }
}

/// Splits a JSON object into the typed value and the keys it does not use.
fn split_known<T: Serialize + for<'de> Deserialize<'de>>(
    raw: Map<String, Value>,
) -> Result<(T, Map<String, Value>), serde_json::Error> {
    let typed: T = serde_json::from_value(Value::Object(raw.clone()))?;
    let known = match serde_json::to_value(&typed)? {
        Value::Object(m) => m,
        _ => Map::new(),
    };
    let extra = raw
        .into_iter()
        .filter(|(k, _)| !known.contains_key(k))
        .collect();
    Ok((typed, extra))
}

fn merge_known<T: Serialize>(value: &T, extra: &Map<String, Value>) -> Value {
    let mut v = serde_json::to_value(value).expect("store types serialize");
    if let Value::Object(m) = &mut v {
        for (k, val) in extra {
            m.entry(k.clone()).or_insert_with(|| val.clone());
        }
    }
    v
}

#[derive(Serialize, Deserialize)]
struct EventEnvelope {
    record: String,
    block: Block,
    #[serde(rename = "trial")]
    trial_id: u32,
    #[serde(flatten)]
    event: Event,
}

#[derive(Serialize, Deserialize)]
struct EventsHeader {
    record: String,
    schema_version: u32,
    session_id: String,
    seed: u64,
}

pub fn session_dir(root: &Path, session_id: &str) -> PathBuf {
    root.join(session_id)
}

/// Writes all files of a session into `dir`, creating it if needed.
pub fn write_session(dir: &Path, data: &SessionData) -> Result<(), StoreError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_manifest(&dir.join(MANIFEST_FILE), &data.manifest)?;
    write_events(&dir.join(EVENTS_FILE), data)?;
    write_trace(&dir.join(TRACE_FILE), data)?;
    write_outcomes(&dir.join(OUTCOMES_FILE), data)
}

/// Derived per-trial outcomes. Skipped when the logs cannot be scored, which
/// only happens for hand-edited or truncated sessions; readers never need it.
fn write_outcomes(path: &Path, data: &SessionData) -> Result<(), StoreError> {
    let Ok(outcomes) = crate::analysis::derive_outcomes(data) else {
        // Never leave a stale copy from an earlier write.
        return match fs::remove_file(path) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(io_err(path)(e)),
            _ => Ok(()),
        };
    };
    let file = fs::File::create(path).map_err(io_err(path))?;
    crate::analysis::write_outcomes_csv(BufWriter::new(file), &outcomes).map_err(|e| {
        StoreError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e),
        }
    })
}

fn write_manifest(path: &Path, m: &SessionManifest) -> Result<(), StoreError> {
    let v = merge_known(m, &m.extra);
    let mut text = serde_json::to_string_pretty(&v).expect("manifest serializes");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn write_events(path: &Path, data: &SessionData) -> Result<(), StoreError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let header = EventsHeader {
        record: "header".into(),
        schema_version: SCHEMA_VERSION,
        session_id: data.manifest.session_id.clone(),
        seed: data.manifest.seed,
    };
    let mut line = serde_json::to_string(&header).expect("header serializes");
    for trial in &data.trials {
        for stored in &trial.events {
            writeln!(w, "{line}").map_err(io_err(path))?;
            let env = EventEnvelope {
                record: "event".into(),
                block: trial.block,
                trial_id: trial.spec.trial_id,
                event: stored.event.clone(),
            };
            line = merge_known(&env, &stored.extra).to_string();
        }
    }
    writeln!(w, "{line}").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

const TRACE_FIXED: [&str; 11] = [
    "block",
    "trial_id",
    "tick",
    "t",
    "x",
    "y",
    "heading",
    "head_yaw",
    "head_pitch",
    "head_roll",
    "speed",
];

fn ped_slots(data: &SessionData) -> usize {
    data.trials
        .iter()
        .flat_map(|t| t.samples.iter().map(|s| s.pedestrians.len()))
        .max()
        .unwrap_or(0)
}

fn write_trace(path: &Path, data: &SessionData) -> Result<(), StoreError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let slots = ped_slots(data);
    let mut line = String::new();
    let _ = write!(
        line,
        "# pedtrial-trace schema_version={} seed={} session_id={}",
        SCHEMA_VERSION, data.manifest.seed, data.manifest.session_id
    );
    writeln!(w, "{line}").map_err(io_err(path))?;
    line.clear();
    line.push_str(&TRACE_FIXED.join(","));
    for i in 0..slots {
        let _ = write!(line, ",ped{i}_x,ped{i}_y");
    }
    for c in &data.trace_extra_columns {
        line.push(',');
        line.push_str(c);
    }
    writeln!(w, "{line}").map_err(io_err(path))?;
    for trial in &data.trials {
        for (k, s) in trial.samples.iter().enumerate() {
            line.clear();
            let p = &s.subject;
            let _ = write!(
                line,
                "{},{},{},{},{},{},{},{},{},{},{}",
                trial.block.as_str(),
                trial.spec.trial_id,
                s.tick,
                s.t,
                p.position.x,
                p.position.y,
                p.body_heading,
                p.head_yaw,
                p.head_pitch,
                p.head_roll,
                p.speed
            );
            for i in 0..slots {
                match s.pedestrians.get(i) {
                    Some(v) => {
                        let _ = write!(line, ",{},{}", v.x, v.y);
                    }
                    None => line.push_str(",,"),
                }
            }
            if !data.trace_extra_columns.is_empty() {
                let extras = trial.sample_extras.get(k);
                for j in 0..data.trace_extra_columns.len() {
                    line.push(',');
                    if let Some(v) = extras.and_then(|e| e.get(j)) {
                        line.push_str(v);
                    }
                }
            }
            writeln!(w, "{line}").map_err(io_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<SessionManifest, StoreError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let raw: Map<String, Value> = serde_json::from_str(&text).map_err(|e| StoreError::Invalid {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    check_version(path, raw.get("schema_version"))?;
    let (mut manifest, extra) =
        split_known::<SessionManifest>(raw).map_err(|e| StoreError::Invalid {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    manifest.extra = extra;
    if !manifest.digest_matches() {
        return Err(StoreError::Invalid {
            path: path.to_path_buf(),
            reason: "trial_digest does not match the trial lists".into(),
        });
    }
    Ok(manifest)
}

fn check_version(path: &Path, v: Option<&Value>) -> Result<(), StoreError> {
    match v.and_then(Value::as_u64) {
        Some(found) if found == SCHEMA_VERSION as u64 => Ok(()),
        Some(found) => Err(StoreError::Incompatible {
            path: path.to_path_buf(),
            found,
            expected: SCHEMA_VERSION,
        }),
        None => Err(StoreError::Invalid {
            path: path.to_path_buf(),
            reason: "missing schema_version".into(),
        }),
    }
}

/// Events of one session in file order, tagged with their trial.
#[derive(Debug, Clone, PartialEq)]
pub struct EventLine {
    pub block: Block,
    pub trial_id: u32,
    pub stored: StoredEvent,
}

/// Reads events up to the first bad record.
///
/// Returns every complete record before the problem together with the error,
/// so a crashed session stays readable up to its last full line.
pub fn read_events_lenient(
    path: &Path,
) -> Result<(Vec<EventLine>, Option<StoreError>), StoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    let mut offset = 0usize;
    let mut record = 0usize;
    let integrity = |offset: usize, record: usize, reason: String| StoreError::Integrity {
        path: path.to_path_buf(),
        offset: offset as u64,
        record,
        reason,
    };
    while offset < bytes.len() {
        let Some(nl) = bytes[offset..].iter().position(|&b| b == b'\n') else {
            return Ok((
                out,
                Some(integrity(
                    offset,
                    record,
                    "truncated record (no newline)".into(),
                )),
            ));
        };
        let line = &bytes[offset..offset + nl];
        let parsed: Result<Map<String, Value>, String> = std::str::from_utf8(line)
            .map_err(|e| e.to_string())
            .and_then(|s| serde_json::from_str(s).map_err(|e| e.to_string()));
        let raw = match parsed {
            Ok(m) => m,
            Err(reason) => return Ok((out, Some(integrity(offset, record, reason)))),
        };
        if record == 0 {
            if raw.get("record").and_then(Value::as_str) != Some("header") {
                return Err(integrity(
                    offset,
                    0,
                    "first record must be the header".into(),
                ));
            }
            check_version(path, raw.get("schema_version"))?;
        } else {
            match split_known::<EventEnvelope>(raw) {
                Ok((env, extra)) => out.push(EventLine {
                    block: env.block,
                    trial_id: env.trial_id,
                    stored: StoredEvent {
                        event: env.event,
                        extra,
                    },
                }),
                Err(e) => return Ok((out, Some(integrity(offset, record, e.to_string())))),
            }
        }
        offset += nl + 1;
        record += 1;
    }
    if record == 0 {
        return Err(integrity(0, 0, "empty event file".into()));
    }
    Ok((out, None))
}

pub fn read_events(path: &Path) -> Result<Vec<EventLine>, StoreError> {
    match read_events_lenient(path)? {
        (lines, None) => Ok(lines),
        (_, Some(err)) => Err(err),
    }
}

pub struct TraceTable {
    pub extra_columns: Vec<String>,
    pub rows: Vec<TraceRow>,
}

pub struct TraceRow {
    pub block: Block,
    pub trial_id: u32,
    pub sample: PoseSample,
    pub extra: Vec<String>,
}

pub fn read_trace(path: &Path) -> Result<TraceTable, StoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let integrity = |offset: u64, record: usize, reason: String| StoreError::Integrity {
        path: path.to_path_buf(),
        offset,
        record,
        reason,
    };
    let first_nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| integrity(0, 0, "missing metadata line".into()))?;
    let meta = String::from_utf8_lossy(&bytes[..first_nl]);
    let version = meta
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix("schema_version="))
        .and_then(|v| v.parse::<u64>().ok());
    check_version(path, version.map(Value::from).as_ref())?;
    if !bytes.ends_with(b"\n") {
        return Err(integrity(
            bytes.len() as u64,
            0,
            "truncated final row (no newline)".into(),
        ));
    }
    let body = &bytes[first_nl + 1..];
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(body);
    let headers = rdr
        .headers()
        .map_err(|e| integrity(first_nl as u64 + 1, 0, e.to_string()))?
        .clone();
    let mut slots = 0usize;
    while headers.get(TRACE_FIXED.len() + 2 * slots) == Some(&format!("ped{slots}_x")) {
        slots += 1;
    }
    for (i, name) in TRACE_FIXED.iter().enumerate() {
        if headers.get(i) != Some(name) {
            return Err(integrity(
                first_nl as u64 + 1,
                0,
                format!("expected column {name:?} at {i}"),
            ));
        }
    }
    let extra_start = TRACE_FIXED.len() + 2 * slots;
    let extra_columns: Vec<String> = headers
        .iter()
        .skip(extra_start)
        .map(str::to_owned)
        .collect();
    let mut rows = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let base = first_nl as u64 + 1;
        let rec = rec.map_err(|e| {
            let off = e.position().map(|p| p.byte()).unwrap_or(0);
            integrity(base + off, idx + 1, e.to_string())
        })?;
        let off = base + rec.position().map(|p| p.byte()).unwrap_or(0);
        let f = |i: usize| -> Result<f64, StoreError> {
            rec.get(i)
                .unwrap_or("")
                .parse::<f64>()
                .map_err(|e| integrity(off, idx + 1, format!("column {i}: {e}")))
        };
        let block = Block::parse(rec.get(0).unwrap_or(""))
            .ok_or_else(|| integrity(off, idx + 1, "unknown block".into()))?;
        let trial_id = rec
            .get(1)
            .unwrap_or("")
            .parse::<u32>()
            .map_err(|e| integrity(off, idx + 1, e.to_string()))?;
        let tick = rec
            .get(2)
            .unwrap_or("")
            .parse::<u64>()
            .map_err(|e| integrity(off, idx + 1, e.to_string()))?;
        let subject = SubjectPose {
            position: Vec2::new(f(4)?, f(5)?),
            body_heading: f(6)?,
            head_yaw: f(7)?,
            head_pitch: f(8)?,
            head_roll: f(9)?,
            speed: f(10)?,
        };
        let mut pedestrians = Vec::new();
        for i in 0..slots {
            let c = TRACE_FIXED.len() + 2 * i;
            if rec.get(c).unwrap_or("").is_empty() {
                break;
            }
            pedestrians.push(Vec2::new(f(c)?, f(c + 1)?));
        }
        rows.push(TraceRow {
            block,
            trial_id,
            sample: PoseSample {
                tick,
                t: f(3)?,
                subject,
                pedestrians,
            },
            extra: rec.iter().skip(extra_start).map(str::to_owned).collect(),
        });
    }
    Ok(TraceTable {
        extra_columns,
        rows,
    })
}

/// Reads a complete session written by [`write_session`].
pub fn read_session(dir: &Path) -> Result<SessionData, StoreError> {
    let manifest = read_manifest(&dir.join(MANIFEST_FILE))?;
    let events_path = dir.join(EVENTS_FILE);
    let events = read_events(&events_path)?;
    let trace = read_trace(&dir.join(TRACE_FILE))?;

    let mut trials: Vec<TrialRecord> = Vec::new();
    let mut index = std::collections::HashMap::new();
    for line in events {
        let key = (line.block, line.trial_id);
        let slot = match index.get(&key) {
            Some(&i) => i,
            None => {
                let spec = manifest
                    .trial(line.block, line.trial_id)
                    .cloned()
                    .ok_or_else(|| StoreError::Invalid {
                        path: events_path.clone(),
                        reason: format!(
                            "event for unknown trial {:?}/{}",
                            line.block, line.trial_id
                        ),
                    })?;
                trials.push(TrialRecord {
                    block: line.block,
                    spec,
                    events: Vec::new(),
                    samples: Vec::new(),
                    sample_extras: Vec::new(),
                });
                index.insert(key, trials.len() - 1);
                trials.len() - 1
            }
        };
        trials[slot].events.push(line.stored);
    }
    let has_extras = !trace.extra_columns.is_empty();
    for row in trace.rows {
        let Some(&slot) = index.get(&(row.block, row.trial_id)) else {
            return Err(StoreError::Invalid {
                path: dir.join(TRACE_FILE),
                reason: format!(
                    "trace row for trial without events {:?}/{}",
                    row.block, row.trial_id
                ),
            });
        };
        trials[slot].samples.push(row.sample);
        if has_extras {
            trials[slot].sample_extras.push(row.extra);
        }
    }
    Ok(SessionData {
        manifest,
        trials,
        trace_extra_columns: trace.extra_columns,
    })
}

/// Session directories directly under `root` (those containing a manifest).
pub fn list_sessions(root: &Path) -> Result<Vec<PathBuf>, StoreError> {
    if root.join(MANIFEST_FILE).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        let p = entry.path();
        if p.join(MANIFEST_FILE).is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Append-only event writer for sessions that are still running.
pub struct EventAppender {
    path: PathBuf,
    writer: BufWriter<fs::File>,
}

impl EventAppender {
    pub fn create(path: &Path, session_id: &str, seed: u64) -> Result<Self, StoreError> {
        let file = fs::File::create(path).map_err(io_err(path))?;
        let mut writer = BufWriter::new(file);
        let header = EventsHeader {
            record: "header".into(),
            schema_version: SCHEMA_VERSION,
            session_id: session_id.into(),
            seed,
        };
        writeln!(
            writer,
            "{}",
            serde_json::to_string(&header).expect("header serializes")
        )
        .map_err(io_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            writer,
        })
    }

    pub fn append(&mut self, block: Block, trial_id: u32, event: &Event) -> Result<(), StoreError> {
        let env = EventEnvelope {
            record: "event".into(),
            block,
            trial_id,
            event: event.clone(),
        };
        let line = serde_json::to_string(&env).expect("event serializes");
        writeln!(self.writer, "{line}").map_err(io_err(&self.path))
    }

    pub fn flush(&mut self) -> Result<(), StoreError> {
        self.writer.flush().map_err(io_err(&self.path))
    }
}
