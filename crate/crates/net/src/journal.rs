//! Append-only JSON-lines journal of state-changing requests.
//!
//! Claims are not journaled: after a restart every task that was in flight
//! is pending again, and a late result for it is still accepted.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use gprop_core::protocol::{EvaluationResult, EvaluationTask, JobDescriptor};
use gprop_core::queue::{JobState, JobStore};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum JournalEvent {
    CreateJob {
        job_id: String,
        descriptor: JobDescriptor,
        lease_ms: u64,
    },
    Enqueue {
        job_id: String,
        tasks: Vec<EvaluationTask>,
    },
    Result {
        job_id: String,
        result: EvaluationResult,
    },
    Terminate {
        job_id: String,
    },
}

pub struct Journal {
    path: PathBuf,
    out: Mutex<BufWriter<File>>,
}

impl Journal {
    pub fn open(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            out: Mutex::new(BufWriter::new(file)),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, event: &JournalEvent) -> io::Result<()> {
        let mut out = self.out.lock();
        serde_json::to_writer(&mut *out, event)?;
        out.write_all(b"\n")?;
        out.flush()
    }
}

/// Rebuilds a store from a journal file. A missing file yields an empty
/// store; a torn final line (crash mid-write) is ignored.
pub fn replay(path: &Path, store: &JobStore) -> io::Result<usize> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(0),
        Err(e) => return Err(e),
    };
    let lines: Vec<String> = BufReader::new(file).lines().collect::<Result<_, _>>()?;
    let last = lines.len().saturating_sub(1);
    let mut applied = 0;
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let event: JournalEvent = match serde_json::from_str(line) {
            Ok(e) => e,
            Err(_) if i == last => break,
            Err(e) => {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("journal line {}: {e}", i + 1),
                ))
            }
        };
        apply(store, event);
        applied += 1;
    }
    Ok(applied)
}

fn apply(store: &JobStore, event: JournalEvent) {
    // Replayed operations succeeded once already; errors here mean the
    // journal repeats itself and are safe to skip.
    match event {
        JournalEvent::CreateJob {
            job_id,
            descriptor,
            lease_ms,
        } => store.insert_job(JobState::new(job_id, descriptor, lease_ms)),
        JournalEvent::Enqueue { job_id, tasks } => {
            let _ = store.enqueue(&job_id, tasks);
        }
        JournalEvent::Result { job_id, result } => {
            let _ = store.submit(&job_id, result);
        }
        JournalEvent::Terminate { job_id } => {
            let _ = store.terminate(&job_id);
        }
    }
}
