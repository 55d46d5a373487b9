//! Append-only run store.
//!
//! A run directory holds `run.json` (the config hash the run was started
//! with) and `events.jsonl`, one JSON event per line. Model traffic, stage
//! records and review decisions are all events; every derived file can be
//! rebuilt from the stage records alone.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::gateway::{ChatMessage, Stage};

pub const EVENTS_FILE: &str = "events.jsonl";
pub const MANIFEST_FILE: &str = "run.json";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("run store I/O on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt event at {path}:{line}: {reason}")]
    Corrupt { path: String, line: usize, reason: String },
    #[error("run store was created with config {stored}, but the supplied config hashes to {supplied}")]
    ConfigMismatch { stored: String, supplied: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    Request {
        stage: Stage,
        key: String,
        attempt: u32,
        request_hash: String,
        messages: Vec<ChatMessage>,
    },
    Response {
        stage: Stage,
        key: String,
        attempt: u32,
        request_hash: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        response_hash: Option<String>,
        #[serde(skip_serializing_if = "Option::is_none")]
        text: Option<String>,
        #[serde(skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    /// The finished output of one pipeline stage for one key (usually a unit id).
    Record {
        stage: String,
        key: String,
        data: Value,
    },
    StageComplete {
        stage: String,
        count: usize,
    },
    /// An accepted review decision.
    Decision {
        data: Value,
    },
    /// A mutation that was refused; kept for the audit trail.
    Rejected {
        stage: String,
        reason: String,
        data: Value,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Envelope {
    pub seq: u64,
    pub ts: String,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config_hash: String,
}

#[derive(Default)]
struct State {
    seq: u64,
    /// stage -> key -> latest record data
    records: HashMap<String, BTreeMap<String, Value>>,
    complete: HashMap<String, usize>,
}

pub struct RunStore {
    dir: PathBuf,
    file: Mutex<(File, State)>,
}

impl std::fmt::Debug for RunStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RunStore").field("dir", &self.dir).finish()
    }
}

impl RunStore {
    /// Open or create the store in `dir`. An existing store must have been
    /// created with the same config hash. A torn final line (from a killed
    /// process) is truncated away.
    pub fn open(dir: &Path, config_hash: &str) -> Result<Self, StoreError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        if manifest_path.exists() {
            let raw = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
            let m: Manifest = serde_json::from_str(&raw).map_err(|e| StoreError::Corrupt {
                path: manifest_path.display().to_string(),
                line: 1,
                reason: e.to_string(),
            })?;
            if m.config_hash != config_hash {
                return Err(StoreError::ConfigMismatch {
                    stored: m.config_hash,
                    supplied: config_hash.to_string(),
                });
            }
        } else {
            let m = Manifest {
                config_hash: config_hash.to_string(),
            };
            let body = serde_json::to_string_pretty(&m).expect("manifest serializes") + "\n";
            fs::write(&manifest_path, body).map_err(io_err(&manifest_path))?;
        }

        let events_path = dir.join(EVENTS_FILE);
        let mut state = State::default();
        if events_path.exists() {
            let valid_len = load_events(&events_path, &mut state)?;
            let f = OpenOptions::new()
                .write(true)
                .open(&events_path)
                .map_err(io_err(&events_path))?;
            f.set_len(valid_len).map_err(io_err(&events_path))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&events_path)
            .map_err(io_err(&events_path))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            file: Mutex::new((file, state)),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn append(&self, event: Event) -> Result<u64, StoreError> {
        let mut guard = self.file.lock().expect("run store lock poisoned");
        let (file, state) = &mut *guard;
        state.seq += 1;
        let env = Envelope {
            seq: state.seq,
            ts: Utc::now().to_rfc3339_opts(SecondsFormat::Micros, true),
            event,
        };
        let mut line = serde_json::to_string(&env).expect("event serializes");
        line.push('\n');
        let path = self.dir.join(EVENTS_FILE);
        file.write_all(line.as_bytes()).map_err(io_err(&path))?;
        file.flush().map_err(io_err(&path))?;
        index(state, &env.event);
        Ok(env.seq)
    }

    pub fn put_record(&self, stage: &str, key: &str, data: &impl Serialize) -> Result<(), StoreError> {
        let data = serde_json::to_value(data).expect("record serializes");
        self.append(Event::Record {
            stage: stage.to_string(),
            key: key.to_string(),
            data,
        })
        .map(|_| ())
    }

    pub fn record(&self, stage: &str, key: &str) -> Option<Value> {
        let guard = self.file.lock().expect("run store lock poisoned");
        guard.1.records.get(stage).and_then(|m| m.get(key)).cloned()
    }

    pub fn records(&self, stage: &str) -> BTreeMap<String, Value> {
        let guard = self.file.lock().expect("run store lock poisoned");
        guard.1.records.get(stage).cloned().unwrap_or_default()
    }

    pub fn mark_complete(&self, stage: &str, count: usize) -> Result<(), StoreError> {
        self.append(Event::StageComplete {
            stage: stage.to_string(),
            count,
        })
        .map(|_| ())
    }

    pub fn is_complete(&self, stage: &str) -> bool {
        let guard = self.file.lock().expect("run store lock poisoned");
        guard.1.complete.contains_key(stage)
    }

    /// Every event currently in the log, in append order.
    pub fn events(&self) -> Result<Vec<Envelope>, StoreError> {
        let _guard = self.file.lock().expect("run store lock poisoned");
        read_envelopes(&self.dir.join(EVENTS_FILE))
    }
}

fn index(state: &mut State, event: &Event) {
    match event {
        Event::Record { stage, key, data } => {
            state
                .records
                .entry(stage.clone())
                .or_default()
                .insert(key.clone(), data.clone());
        }
        Event::StageComplete { stage, count } => {
            state.complete.insert(stage.clone(), *count);
        }
        _ => {}
    }
}

/// Load events into `state`; returns the byte length of the valid prefix.
fn load_events(path: &Path, state: &mut State) -> Result<u64, StoreError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut reader = BufReader::new(f);
    let mut valid = 0u64;
    let mut line = String::new();
    let mut lineno = 0usize;
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        lineno += 1;
        if !line.ends_with('\n') {
            // torn write from an interrupted process
            break;
        }
        let env: Envelope = serde_json::from_str(line.trim_end()).map_err(|e| StoreError::Corrupt {
            path: path.display().to_string(),
            line: lineno,
            reason: e.to_string(),
        })?;
        state.seq = state.seq.max(env.seq);
        index(state, &env.event);
        valid += n as u64;
    }
    Ok(valid)
}

pub fn read_envelopes(path: &Path) -> Result<Vec<Envelope>, StoreError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let content = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in content.split_inclusive('\n').enumerate() {
        if !line.ends_with('\n') {
            break;
        }
        out.push(serde_json::from_str(line.trim_end()).map_err(|e| StoreError::Corrupt {
            path: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn records_survive_reopen() {
        let dir = tempfile::tempdir().unwrap();
        {
            let s = RunStore::open(dir.path(), "h1").unwrap();
            s.put_record("detect", "u1", &json!({"label": "yes"})).unwrap();
            s.put_record("detect", "u1", &json!({"label": "no"})).unwrap();
            s.mark_complete("detect", 1).unwrap();
        }
        let s = RunStore::open(dir.path(), "h1").unwrap();
        assert_eq!(s.record("detect", "u1").unwrap(), json!({"label": "no"}));
        assert!(s.is_complete("detect"));
        let seq = s
            .append(Event::StageComplete {
                stage: "x".into(),
                count: 0,
            })
            .unwrap();
        assert_eq!(seq, 4);
    }

    #[test]
    fn config_mismatch_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        RunStore::open(dir.path(), "h1").unwrap();
        let err = RunStore::open(dir.path(), "h2").unwrap_err();
        assert!(matches!(err, StoreError::ConfigMismatch { .. }));
    }

    #[test]
    fn torn_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        {
            let s = RunStore::open(dir.path(), "h").unwrap();
            s.put_record("a", "k", &json!(1)).unwrap();
        }
        let path = dir.path().join(EVENTS_FILE);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"seq\":2,\"ts\":\"x\",\"kind\":\"rec").unwrap();
        drop(f);
        let s = RunStore::open(dir.path(), "h").unwrap();
        assert_eq!(s.records("a").len(), 1);
        s.put_record("a", "k2", &json!(2)).unwrap();
        assert_eq!(s.events().unwrap().len(), 2);
    }
}
