//! On-disk layout of a store directory:
//!
//! - `events.jsonl`: one [`LoggedEvent`] per line, strictly increasing `seq`.
//! - `snapshot.json`: `{ "seq": n, "dataset": ... }`, the state after event `n`.
//! - `.lock`: present while a writer holds the store open.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use super::{ClassCatalog, Dataset, LabelStore, LoggedEvent, Result, StoreError};

const EVENTS: &str = "events.jsonl";
const SNAPSHOT: &str = "snapshot.json";
const LOCK: &str = ".lock";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Snapshot {
    seq: u64,
    dataset: Dataset,
}

/// Reads a JSON-lines event log. Unknown event types or states are a hard error.
pub fn read_event_log(path: &Path) -> Result<Vec<LoggedEvent>> {
    let reader = BufReader::new(File::open(path)?);
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let logged: LoggedEvent =
            serde_json::from_str(&line).map_err(|e| StoreError::CorruptLog {
                line: i + 1,
                reason: e.to_string(),
            })?;
        if let Some(prev) = events.last().map(|e: &LoggedEvent| e.seq) {
            if logged.seq <= prev {
                return Err(StoreError::CorruptLog {
                    line: i + 1,
                    reason: format!("sequence {} does not follow {prev}", logged.seq),
                });
            }
        }
        events.push(logged);
    }
    Ok(events)
}

pub fn write_event_log(path: &Path, events: &[LoggedEvent]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(DirLock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(StoreError::Locked(path.display().to_string()))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// A [`LabelStore`] backed by a directory, holding the writer lock while open.
pub struct PersistentStore {
    dir: Option<PathBuf>,
    store: LabelStore,
    flushed: usize,
    _lock: Option<DirLock>,
}

impl PersistentStore {
    /// Creates a new store directory. Fails if the directory already holds a log.
    pub fn create(dir: &Path, catalog: ClassCatalog) -> Result<Self> {
        fs::create_dir_all(dir)?;
        if dir.join(EVENTS).exists() {
            return Err(StoreError::Schema {
                record: dir.display().to_string(),
                reason: "store already initialised".into(),
            });
        }
        let lock = DirLock::acquire(dir)?;
        let mut p = Self {
            dir: Some(dir.to_path_buf()),
            store: LabelStore::new(catalog),
            flushed: 0,
            _lock: Some(lock),
        };
        p.flush()?;
        Ok(p)
    }

    /// Opens an existing store: loads the snapshot if present, then applies
    /// the log tail after it.
    pub fn open(dir: &Path) -> Result<Self> {
        let events_path = dir.join(EVENTS);
        if !events_path.exists() {
            return Err(StoreError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("no store at {}", dir.display()),
            )));
        }
        let lock = DirLock::acquire(dir)?;
        let snapshot_path = dir.join(SNAPSHOT);
        let mut store = if snapshot_path.exists() {
            let snap: Snapshot = serde_json::from_reader(BufReader::new(File::open(&snapshot_path)?))?;
            LabelStore::from_snapshot(snap.dataset, snap.seq)
        } else {
            LabelStore::default()
        };
        let base = store.last_seq();
        for logged in read_event_log(&events_path)? {
            if logged.seq > base {
                store.apply_logged(logged)?;
            }
        }
        let flushed = store.events().len();
        Ok(Self {
            dir: Some(dir.to_path_buf()),
            store,
            flushed,
            _lock: Some(lock),
        })
    }

    /// A store with no backing directory; `flush` and `checkpoint` are no-ops.
    pub fn in_memory(store: LabelStore) -> Self {
        Self {
            dir: None,
            flushed: store.events().len(),
            store,
            _lock: None,
        }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn store(&self) -> &LabelStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut LabelStore {
        &mut self.store
    }

    /// Appends events not yet on disk.
    pub fn flush(&mut self) -> Result<()> {
        let Some(dir) = &self.dir else {
            self.flushed = self.store.events().len();
            return Ok(());
        };
        let pending = &self.store.events()[self.flushed..];
        if pending.is_empty() {
            return Ok(());
        }
        let mut out = BufWriter::new(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join(EVENTS))?,
        );
        for e in pending {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        out.get_ref().sync_data()?;
        self.flushed = self.store.events().len();
        Ok(())
    }

    /// Flushes and writes a snapshot of the current state.
    pub fn checkpoint(&mut self) -> Result<()> {
        self.flush()?;
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        let tmp = dir.join("snapshot.json.tmp");
        {
            let mut out = BufWriter::new(File::create(&tmp)?);
            serde_json::to_writer(
                &mut out,
                &Snapshot {
                    seq: self.store.last_seq(),
                    dataset: self.store.dataset().clone(),
                },
            )?;
            out.flush()?;
        }
        fs::rename(tmp, dir.join(SNAPSHOT))?;
        Ok(())
    }

    /// Replaces the in-memory store with `next` (which must extend the current
    /// log) and flushes.
    fn replace(&mut self, next: LabelStore) -> Result<()> {
        debug_assert!(next.events().len() >= self.flushed);
        self.store = next;
        self.flush()
    }
}

/// Shared access to a store: one serialized writer, any number of readers.
///
/// Writes run against a copy of the store and are swapped in only if the
/// whole closure succeeds, so a failed multi-event mutation leaves nothing
/// behind.
#[derive(Clone)]
pub struct StoreHandle {
    inner: Arc<RwLock<PersistentStore>>,
}

impl StoreHandle {
    pub fn new(store: PersistentStore) -> Self {
        Self {
            inner: Arc::new(RwLock::new(store)),
        }
    }

    /// An immutable copy of the current dataset.
    pub fn snapshot(&self) -> Dataset {
        self.inner.read().store().dataset().clone()
    }

    pub fn read<R>(&self, f: impl FnOnce(&LabelStore) -> R) -> R {
        f(self.inner.read().store())
    }

    pub fn write<R, E>(&self, f: impl FnOnce(&mut LabelStore) -> Result<R, E>) -> Result<R, E>
    where
        E: From<StoreError>,
    {
        let mut guard = self.inner.write();
        let mut staged = guard.store().clone();
        let out = f(&mut staged)?;
        guard.replace(staged)?;
        Ok(out)
    }

    pub fn checkpoint(&self) -> Result<()> {
        self.inner.write().checkpoint()
    }
}
