//! Data-access audit trail.
//!
//! Dataset readers record every annotation/image file they touch, tagged
//! with the pipeline stage active at the time. Tests and the reproducibility
//! harness parse the log to prove that no ground-truth annotation bytes are
//! read while a distillation stage is running. Events carry a sequence
//! number instead of a timestamp so logs are byte-identical across reruns.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::{Arc, Mutex};

pub const READ_ANNOTATIONS: &str = "read_annotations";
pub const READ_HIDDEN_ANNOTATIONS: &str = "read_hidden_annotations";
pub const READ_IMAGES: &str = "read_images";
pub const STAGE_BEGIN: &str = "stage_begin";
pub const STAGE_END: &str = "stage_end";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AuditEvent {
    pub seq: u64,
    pub stage: String,
    pub action: String,
    pub detail: String,
}

impl AuditEvent {
    /// Does this event represent ground-truth annotation bytes being read?
    pub fn is_gt_read(&self) -> bool {
        self.action == READ_ANNOTATIONS || self.action == READ_HIDDEN_ANNOTATIONS
    }
}

#[derive(Default)]
struct Inner {
    events: Vec<AuditEvent>,
    stages: Vec<String>,
}

/// Shared, thread-safe audit log.
#[derive(Clone, Default)]
pub struct AuditLog {
    inner: Arc<Mutex<Inner>>,
}

impl AuditLog {
    pub fn new() -> Self {
        AuditLog::default()
    }

    fn current_stage(stages: &[String]) -> String {
        if stages.is_empty() {
            "setup".to_string()
        } else {
            stages.join("/")
        }
    }

    pub fn record(&self, action: &str, detail: &str) {
        let mut inner = self.inner.lock().unwrap();
        let seq = inner.events.len() as u64;
        let stage = Self::current_stage(&inner.stages);
        inner.events.push(AuditEvent {
            seq,
            stage,
            action: action.to_string(),
            detail: detail.to_string(),
        });
    }

    /// Enter a named stage; the returned guard leaves it on drop.
    pub fn stage(&self, name: &str) -> StageGuard {
        {
            let mut inner = self.inner.lock().unwrap();
            inner.stages.push(name.to_string());
            let seq = inner.events.len() as u64;
            let stage = Self::current_stage(&inner.stages);
            inner.events.push(AuditEvent {
                seq,
                stage,
                action: STAGE_BEGIN.to_string(),
                detail: name.to_string(),
            });
        }
        StageGuard {
            log: self.clone(),
            name: name.to_string(),
        }
    }

    pub fn events(&self) -> Vec<AuditEvent> {
        self.inner.lock().unwrap().events.clone()
    }

    /// Current event count, usable to slice out a run's events later.
    pub fn mark(&self) -> usize {
        self.inner.lock().unwrap().events.len()
    }

    pub fn events_since(&self, mark: usize) -> Vec<AuditEvent> {
        self.inner.lock().unwrap().events[mark..].to_vec()
    }

    /// Write the whole log as JSON lines.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_events(&self.events(), path)
    }
}

pub fn write_events(events: &[AuditEvent], path: &Path) -> Result<()> {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("event serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_events(path: &Path) -> Result<Vec<AuditEvent>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                offset: format!("line {}", i + 1),
                detail: e.to_string(),
            })
        })
        .collect()
}

/// RAII handle for a stage; popping records a stage_end event.
pub struct StageGuard {
    log: AuditLog,
    name: String,
}

impl Drop for StageGuard {
    fn drop(&mut self) {
        let mut inner = self.log.inner.lock().unwrap();
        let seq = inner.events.len() as u64;
        let stage = AuditLog::current_stage(&inner.stages);
        inner.events.push(AuditEvent {
            seq,
            stage,
            action: STAGE_END.to_string(),
            detail: self.name.clone(),
        });
        inner.stages.pop();
    }
}

/// Events lying strictly inside any stage whose name starts with `prefix`.
pub fn events_within_stage<'a>(
    events: &'a [AuditEvent],
    prefix: &'a str,
) -> impl Iterator<Item = &'a AuditEvent> + 'a {
    events.iter().filter(move |e| {
        e.stage
            .split('/')
            .any(|part| part.starts_with(prefix))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stages_nest_and_tag_events() {
        let log = AuditLog::new();
        log.record(READ_IMAGES, "a");
        {
            let _ud = log.stage("ud_seed0");
            log.record(READ_IMAGES, "b");
            {
                let _inner = log.stage("epoch0");
                log.record(READ_ANNOTATIONS, "c");
            }
        }
        log.record(READ_ANNOTATIONS, "d");
        let events = log.events();
        assert_eq!(events[0].stage, "setup");
        assert_eq!(events[2].stage, "ud_seed0");
        assert_eq!(events[4].stage, "ud_seed0/epoch0");
        assert_eq!(events.last().unwrap().stage, "setup");
        let inside: Vec<_> = events_within_stage(&events, "ud_").collect();
        assert!(inside.iter().any(|e| e.detail == "c"));
        assert!(!inside.iter().any(|e| e.detail == "d"));
    }

    #[test]
    fn log_roundtrips_through_file() {
        let log = AuditLog::new();
        log.record(READ_IMAGES, "x");
        log.record(READ_HIDDEN_ANNOTATIONS, "y");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.log");
        log.write(&path).unwrap();
        let events = read_events(&path).unwrap();
        assert_eq!(events, log.events());
        assert!(events[1].is_gt_read());
    }
}
