//! Append-only annotation store.
//!
//! Every accepted write is one JSON line in `annotations.ndjson`; the
//! in-memory state is a fold over those lines. A snapshot of the state is
//! written every [`SNAPSHOT_EVERY`] records so a restart only replays the
//! tail of the log.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use gradia_core::dataset::InstanceId;
use gradia_core::reasonability::{majority_vote, Answer, Verdict};
use serde::{Deserialize, Serialize};

use crate::error::{write_file, Result, WorkbenchError};

pub const LOG_FILE: &str = "annotations.ndjson";
pub const SNAPSHOT_FILE: &str = "snapshot.json";
pub const SNAPSHOT_EVERY: u64 = 256;

/// Answers to the two reasonability questions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answers {
    pub q1_sufficient: Answer,
    pub q2_contextual: Answer,
}

impl Answers {
    pub fn verdict(&self, annotator_id: &str, timestamp: u64) -> Verdict {
        Verdict {
            annotator_id: annotator_id.to_string(),
            timestamp,
            ..Verdict::new(self.q1_sufficient, self.q2_contextual)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub instance_id: InstanceId,
    pub annotator_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Answers>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_rle: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub likert: Option<u8>,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    pub revision: u64,
}

/// One write before the store assigns its revision and timestamp.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    Verdict(Answers),
    Mask(Vec<u32>),
    Likert(u8),
}

/// Latest values one annotator gave for one instance.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatorState {
    pub revision: u64,
    pub verdict: Option<Answers>,
    pub verdict_at: u64,
    pub mask_rle: Option<Vec<u32>>,
    /// Position of the mask's record in the log, to find the newest mask
    /// across annotators.
    pub mask_seq: u64,
    pub likert: Option<u8>,
}

/// The fold over the log; serializes canonically (ordered maps).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreState {
    pub records: u64,
    pub instances: BTreeMap<InstanceId, BTreeMap<String, AnnotatorState>>,
}

impl StoreState {
    pub fn apply(&mut self, r: &AnnotationRecord) -> Result<()> {
        if r.verdict.is_none() && r.mask_rle.is_none() && r.likert.is_none() {
            return Err(WorkbenchError::Config(format!(
                "record {} for instance {} carries no annotation",
                self.records, r.instance_id
            )));
        }
        if let Some(l) = r.likert {
            if !(1..=5).contains(&l) {
                return Err(WorkbenchError::Config(format!("likert rating {l} outside 1..=5")));
            }
        }
        let entry = self
            .instances
            .entry(r.instance_id)
            .or_default()
            .entry(r.annotator_id.clone())
            .or_default();
        if r.revision <= entry.revision {
            return Err(WorkbenchError::Config(format!(
                "revision {} for ({}, {}) does not follow {}",
                r.revision, r.instance_id, r.annotator_id, entry.revision
            )));
        }
        entry.revision = r.revision;
        if let Some(v) = r.verdict {
            entry.verdict = Some(v);
            entry.verdict_at = r.created_at;
        }
        if let Some(m) = &r.mask_rle {
            entry.mask_rle = Some(m.clone());
            entry.mask_seq = self.records;
        }
        if let Some(l) = r.likert {
            entry.likert = Some(l);
        }
        self.records += 1;
        Ok(())
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("state serializes")
    }

    pub fn annotators(&self, id: InstanceId) -> impl Iterator<Item = (&String, &AnnotatorState)> {
        self.instances.get(&id).into_iter().flatten()
    }

    /// Majority over each annotator's latest verdict.
    pub fn verdict(&self, id: InstanceId) -> Option<Verdict> {
        let verdicts: Vec<Verdict> = self
            .annotators(id)
            .filter_map(|(a, s)| s.verdict.map(|v| v.verdict(a, s.verdict_at)))
            .collect();
        majority_vote(&verdicts).ok()
    }

    /// The most recently drawn mask for the instance, by any annotator.
    pub fn mask(&self, id: InstanceId) -> Option<&[u32]> {
        self.annotators(id)
            .filter_map(|(_, s)| s.mask_rle.as_deref().map(|m| (s.mask_seq, m)))
            .max_by_key(|(seq, _)| *seq)
            .map(|(_, m)| m)
    }

    pub fn verdicts(&self) -> BTreeMap<InstanceId, Verdict> {
        self.instances
            .keys()
            .filter_map(|&id| self.verdict(id).map(|v| (id, v)))
            .collect()
    }

    fn next_revision(&self, id: InstanceId, annotator: &str) -> u64 {
        self.instances
            .get(&id)
            .and_then(|m| m.get(annotator))
            .map_or(1, |s| s.revision + 1)
    }
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    state: StoreState,
}

/// The state plus the log it is persisted in.
pub struct AnnotationStore {
    state: StoreState,
    log: Option<(PathBuf, File)>,
}

fn parse_line(line: &str, n: u64, path: &Path) -> Result<AnnotationRecord> {
    serde_json::from_str(line).map_err(|e| WorkbenchError::Config(format!("{} record {n}: {e}", path.display())))
}

/// Folds `log` from the empty state.
pub fn replay(log: &Path) -> Result<StoreState> {
    let mut state = StoreState::default();
    for line in read_lines(log)? {
        let r = parse_line(&line, state.records, log)?;
        state.apply(&r)?;
    }
    Ok(state)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    match File::open(path) {
        Ok(f) => BufReader::new(f)
            .lines()
            .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| WorkbenchError::io(path, e)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(WorkbenchError::io(path, e)),
    }
}

impl AnnotationStore {
    /// A store that keeps nothing on disk.
    pub fn in_memory() -> Self {
        Self {
            state: StoreState::default(),
            log: None,
        }
    }

    /// Opens (or creates) the log in `dir`, starting from the snapshot when
    /// one exists and replaying the records after it.
    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| WorkbenchError::io(dir, e))?;
        let log_path = dir.join(LOG_FILE);
        let lines = read_lines(&log_path)?;
        let snap_path = dir.join(SNAPSHOT_FILE);
        let mut state = match std::fs::read(&snap_path) {
            Ok(bytes) => {
                let snap: Snapshot = serde_json::from_slice(&bytes)
                    .map_err(|e| WorkbenchError::Config(format!("{}: {e}", snap_path.display())))?;
                snap.state
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => StoreState::default(),
            Err(e) => return Err(WorkbenchError::io(&snap_path, e)),
        };
        if state.records as usize > lines.len() {
            // the snapshot is ahead of a truncated log; trust the log
            state = StoreState::default();
        }
        for line in &lines[state.records as usize..] {
            let r = parse_line(line, state.records, &log_path)?;
            state.apply(&r)?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| WorkbenchError::io(&log_path, e))?;
        Ok(Self {
            state,
            log: Some((dir.to_path_buf(), file)),
        })
    }

    pub fn state(&self) -> &StoreState {
        &self.state
    }

    /// Appends one record and applies it. The line is flushed before the
    /// state changes, so an acknowledged write is always in the log.
    pub fn append(&mut self, instance_id: InstanceId, annotator_id: &str, payload: Payload, created_at: u64) -> Result<AnnotationRecord> {
        let mut record = AnnotationRecord {
            instance_id,
            annotator_id: annotator_id.to_string(),
            verdict: None,
            mask_rle: None,
            likert: None,
            created_at,
            revision: self.state.next_revision(instance_id, annotator_id),
        };
        match payload {
            Payload::Verdict(v) => record.verdict = Some(v),
            Payload::Mask(m) => record.mask_rle = Some(m),
            Payload::Likert(l) => record.likert = Some(l),
        }
        let mut next = self.state.clone();
        next.apply(&record)?;
        if let Some((dir, file)) = &mut self.log {
            let mut line = serde_json::to_string(&record).map_err(|e| WorkbenchError::Runtime(e.to_string()))?;
            line.push('\n');
            let path = dir.join(LOG_FILE);
            file.write_all(line.as_bytes()).map_err(|e| WorkbenchError::io(&path, e))?;
            file.sync_data().map_err(|e| WorkbenchError::io(&path, e))?;
        }
        self.state = next;
        if self.state.records % SNAPSHOT_EVERY == 0 {
            self.snapshot()?;
        }
        Ok(record)
    }

    /// Writes the snapshot atomically (temp file then rename).
    pub fn snapshot(&self) -> Result<()> {
        let Some((dir, _)) = &self.log else {
            return Ok(());
        };
        let tmp = dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        let bytes = serde_json::to_vec(&Snapshot {
            state: self.state.clone(),
        })
        .map_err(|e| WorkbenchError::Runtime(e.to_string()))?;
        write_file(&tmp, bytes)?;
        let dest = dir.join(SNAPSHOT_FILE);
        std::fs::rename(&tmp, &dest).map_err(|e| WorkbenchError::io(&dest, e))
    }
}
