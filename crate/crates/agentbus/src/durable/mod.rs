//! Single-file durable backend.
//!
//! Any number of handles, in any number of processes, may open the same file.
//! Appends take an exclusive `flock` on the file, catch up with records written
//! by other handles, then write at the tail, so positions stay dense and
//! totally ordered across processes. Readers pick up foreign appends by
//! re-scanning the file past the last offset they verified.

pub mod record;

use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex, MutexGuard, Weak};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::acl::ClientIdentity;
use crate::bus::{AgentBus, LogCore};
use crate::clock::{Clock, SystemClock};
use crate::entry::Entry;
use crate::error::BusError;
use crate::types::{Payload, TypeSet};
use crate::Position;

use record::{TailState, HEADER_LEN, MAGIC};

/// Poll re-scan interval for appends made through other handles.
const FOREIGN_POLL_INTERVAL: Duration = Duration::from_millis(5);

/// When appends reach the disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[derive(Default)]
pub enum SyncMode {
    /// fsync before every append returns.
    #[default]
    Always,
    /// Appends are written immediately and synced by a background flusher
    /// at most `interval` later.
    Batched(Duration),
}

impl SyncMode {
    pub const DEFAULT_BATCH_INTERVAL: Duration = Duration::from_millis(5);

    pub fn batched() -> Self {
        SyncMode::Batched(Self::DEFAULT_BATCH_INTERVAL)
    }
}


impl FromStr for SyncMode {
    type Err = String;

    /// `always`, `batched`, or `batched:<ms>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            None if s == "always" => Ok(SyncMode::Always),
            None if s == "batched" => Ok(SyncMode::batched()),
            Some(("batched", ms)) => ms
                .parse::<u64>()
                .map(|ms| SyncMode::Batched(Duration::from_millis(ms)))
                .map_err(|e| format!("bad batch interval `{ms}`: {e}")),
            _ => Err(format!("unknown sync mode `{s}`")),
        }
    }
}

impl std::fmt::Display for SyncMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SyncMode::Always => f.write_str("always"),
            SyncMode::Batched(d) => write!(f, "batched:{}", d.as_millis()),
        }
    }
}

impl Serialize for SyncMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SyncMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

/// Storage accounting over the whole file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StorageStats {
    pub records: u64,
    /// Sum of encoded body documents.
    pub payload_bytes: u64,
    /// File size, header included.
    pub file_bytes: u64,
    pub first_ts: u64,
    pub last_ts: u64,
}

impl StorageStats {
    /// Log growth rate over the span between the first and last entry.
    pub fn bytes_per_sec(&self) -> f64 {
        let span_ms = self.last_ts.saturating_sub(self.first_ts).max(1);
        self.file_bytes as f64 * 1000.0 / span_ms as f64
    }
}

struct IoState {
    file: File,
    /// End of the verified prefix of the file.
    offset: u64,
    dirty: bool,
    payload_bytes: u64,
}

struct Inner {
    path: PathBuf,
    core: LogCore,
    io: Mutex<IoState>,
    clock: Arc<dyn Clock>,
    sync_mode: SyncMode,
}

pub struct DurableBus {
    inner: Arc<Inner>,
    flusher: Option<(JoinHandle<()>, std::sync::mpsc::Sender<()>)>,
}

impl DurableBus {
    pub fn open(path: impl AsRef<Path>, sync_mode: SyncMode) -> Result<Self, BusError> {
        Self::open_with_clock(path, sync_mode, Arc::new(SystemClock))
    }

    pub fn open_with_clock(
        path: impl AsRef<Path>,
        sync_mode: SyncMode,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, BusError> {
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(&path)?;
        file.lock()?;
        let opened = Self::recover(&mut file);
        file.unlock()?;
        let (entries, offset, payload_bytes) = opened?;

        let core = LogCore::new();
        {
            let mut state = core.lock();
            for e in entries {
                state.push(e);
            }
        }
        let inner = Arc::new(Inner {
            path,
            core,
            io: Mutex::new(IoState {
                file,
                offset,
                dirty: false,
                payload_bytes,
            }),
            clock,
            sync_mode,
        });
        let flusher = match sync_mode {
            SyncMode::Always => None,
            SyncMode::Batched(interval) => Some(spawn_flusher(Arc::downgrade(&inner), interval)),
        };
        Ok(DurableBus { inner, flusher })
    }

    /// Validates the header, scans every record and truncates a torn tail.
    /// Runs under the exclusive file lock.
    fn recover(file: &mut File) -> Result<(Vec<Entry>, u64, u64), BusError> {
        let len = file.metadata()?.len();
        if len == 0 {
            file.write_all(MAGIC)?;
            file.sync_all()?;
            return Ok((Vec::new(), HEADER_LEN as u64, 0));
        }
        let mut buf = Vec::with_capacity(len as usize);
        file.seek(SeekFrom::Start(0))?;
        file.read_to_end(&mut buf)?;
        if buf.len() < HEADER_LEN {
            // A crash while writing the header of a fresh file.
            if MAGIC.starts_with(&buf) {
                file.set_len(0)?;
                file.write_all_at(MAGIC, 0)?;
                file.sync_all()?;
                return Ok((Vec::new(), HEADER_LEN as u64, 0));
            }
            return Err(BusError::CorruptLog {
                offset: 0,
                reason: "short file header".into(),
            });
        }
        if &buf[..HEADER_LEN] != MAGIC {
            return Err(BusError::CorruptLog {
                offset: 0,
                reason: "not a bus file".into(),
            });
        }
        let scan = record::scan(&buf[HEADER_LEN..], HEADER_LEN as u64, 0)?;
        let valid_end = (HEADER_LEN + scan.valid_len) as u64;
        if scan.tail == TailState::Torn {
            tracing::warn!(
                dropped = len - valid_end,
                "truncating torn tail record of bus file"
            );
            file.set_len(valid_end)?;
            file.sync_all()?;
        }
        let payload_bytes = scan.records.iter().map(|d| d.body_len as u64).sum();
        let entries = scan.records.into_iter().map(|d| d.entry).collect();
        Ok((entries, valid_end, payload_bytes))
    }

    pub fn path(&self) -> &Path {
        &self.inner.path
    }

    pub fn sync_mode(&self) -> SyncMode {
        self.inner.sync_mode
    }

    /// Forces buffered appends to disk.
    pub fn sync(&self) -> Result<(), BusError> {
        let mut io = self.inner.io();
        if io.dirty {
            io.file.sync_data()?;
            io.dirty = false;
        }
        Ok(())
    }

    /// Every entry regardless of type; for tooling that owns the file.
    pub fn entries(&self) -> Result<Vec<Entry>, BusError> {
        self.inner.refresh()?;
        Ok(self.inner.core.lock().entries.clone())
    }

    pub fn storage_stats(&self) -> Result<StorageStats, BusError> {
        self.inner.refresh()?;
        let io = self.inner.io();
        let state = self.inner.core.lock();
        Ok(StorageStats {
            records: state.entries.len() as u64,
            payload_bytes: io.payload_bytes,
            file_bytes: io.offset,
            first_ts: state.entries.first().map_or(0, |e| e.realtime_ts),
            last_ts: state.entries.last().map_or(0, |e| e.realtime_ts),
        })
    }
}

impl Inner {
    fn io(&self) -> MutexGuard<'_, IoState> {
        self.io.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Pulls in complete records appended through other handles.
    fn refresh(&self) -> Result<(), BusError> {
        let mut io = self.io();
        self.catch_up(&mut io, false)
    }

    /// With `repair`, the caller holds the file lock and a torn tail left by a
    /// crashed writer is truncated; otherwise it may be a write in progress
    /// and is left alone.
    fn catch_up(&self, io: &mut IoState, repair: bool) -> Result<(), BusError> {
        let len = io.file.metadata()?.len();
        if len <= io.offset {
            return Ok(());
        }
        let mut buf = vec![0u8; (len - io.offset) as usize];
        io.file.read_exact_at(&mut buf, io.offset)?;
        let first = self.core.tail();
        let scan = record::scan(&buf, io.offset, first)?;
        if scan.tail == TailState::Torn && repair {
            let valid_end = io.offset + scan.valid_len as u64;
            tracing::warn!(
                dropped = len - valid_end,
                "truncating torn tail left by another writer"
            );
            io.file.set_len(valid_end)?;
            io.file.sync_all()?;
        }
        if scan.records.is_empty() {
            return Ok(());
        }
        io.offset += scan.valid_len as u64;
        io.payload_bytes += scan.records.iter().map(|d| d.body_len as u64).sum::<u64>();
        {
            let mut state = self.core.lock();
            for d in scan.records {
                state.push(d.entry);
            }
        }
        self.core.notify();
        Ok(())
    }

    fn append(&self, payload: Payload) -> Result<Position, BusError> {
        let mut io = self.io();
        io.file.lock()?;
        let res = self.append_locked(&mut io, payload);
        let unlock = io.file.unlock();
        let position = res?;
        unlock?;
        self.core.notify();
        Ok(position)
    }

    fn append_locked(&self, io: &mut IoState, payload: Payload) -> Result<Position, BusError> {
        self.catch_up(io, true)?;
        let mut state = self.core.lock();
        if state.closed {
            return Err(BusError::BusClosed);
        }
        let position = state.tail();
        let realtime_ts = state.stamp(self.clock.now_ms());
        let frame = record::encode(position, realtime_ts, &payload);
        let body_len = frame.len() - record::FRAME_PREFIX - record::FIXED_LEN;
        if let Err(e) = io.file.write_all_at(&frame, io.offset) {
            // Leave no partial frame behind for the next writer to repair.
            let _ = io.file.set_len(io.offset);
            return Err(e.into());
        }
        match self.sync_mode {
            SyncMode::Always => io.file.sync_data()?,
            SyncMode::Batched(_) => io.dirty = true,
        }
        io.offset += frame.len() as u64;
        io.payload_bytes += body_len as u64;
        state.push(Entry {
            position,
            realtime_ts,
            payload,
        });
        Ok(position)
    }
}

fn spawn_flusher(
    inner: Weak<Inner>,
    interval: Duration,
) -> (JoinHandle<()>, std::sync::mpsc::Sender<()>) {
    let (stop_tx, stop_rx) = std::sync::mpsc::channel::<()>();
    let handle = std::thread::Builder::new()
        .name("agentbus-flusher".into())
        .spawn(move || loop {
            match stop_rx.recv_timeout(interval) {
                Err(std::sync::mpsc::RecvTimeoutError::Timeout) => {}
                _ => return,
            }
            let Some(inner) = inner.upgrade() else { return };
            let mut io = inner.io();
            if io.dirty {
                if let Err(e) = io.file.sync_data() {
                    tracing::error!(error = %e, "batched fsync failed");
                } else {
                    io.dirty = false;
                }
            }
        })
        .expect("spawn flusher thread");
    (handle, stop_tx)
}

impl Drop for DurableBus {
    fn drop(&mut self) {
        if let Some((handle, stop)) = self.flusher.take() {
            drop(stop);
            let _ = handle.join();
        }
        let _ = self.sync();
    }
}

impl AgentBus for DurableBus {
    fn append(&self, client: &ClientIdentity, payload: Payload) -> Result<Position, BusError> {
        client.check_append(payload.payload_type())?;
        self.inner.append(payload)
    }

    fn read(
        &self,
        client: &ClientIdentity,
        start: Position,
        end: Position,
    ) -> Result<Vec<Entry>, BusError> {
        if start > end {
            return Err(BusError::InvalidRange { start, end });
        }
        self.inner.refresh()?;
        self.inner.core.read(client, start, end)
    }

    fn tail(&self, _client: &ClientIdentity) -> Position {
        if let Err(e) = self.inner.refresh() {
            tracing::warn!(error = %e, "bus refresh failed; serving cached tail");
        }
        self.inner.core.tail()
    }

    fn poll(
        &self,
        client: &ClientIdentity,
        start: Position,
        filter: TypeSet,
        timeout: Duration,
    ) -> Result<Vec<Entry>, BusError> {
        let inner = &self.inner;
        inner.core.poll(
            client,
            start,
            filter,
            timeout,
            &|| inner.refresh(),
            Some(FOREIGN_POLL_INTERVAL),
        )
    }

    fn close(&self) {
        self.inner.core.close();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::PayloadType;

    fn admin() -> ClientIdentity {
        ClientIdentity::admin("admin")
    }

    #[test]
    fn sync_mode_parses() {
        assert_eq!("always".parse::<SyncMode>().unwrap(), SyncMode::Always);
        assert_eq!("batched".parse::<SyncMode>().unwrap(), SyncMode::batched());
        assert_eq!(
            "batched:20".parse::<SyncMode>().unwrap(),
            SyncMode::Batched(Duration::from_millis(20))
        );
        assert!("sometimes".parse::<SyncMode>().is_err());
        assert_eq!(SyncMode::batched().to_string(), "batched:5");
    }

    #[test]
    fn reopen_preserves_entries() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bus.log");
        let written: Vec<Entry> = {
            let bus = DurableBus::open(&path, SyncMode::Always).unwrap();
            for i in 0..5 {
                bus.append(&admin(), Payload::mail("u", format!("m{i}"))).unwrap();
            }
            bus.read(&admin(), 0, 5).unwrap()
        };
        let bus = DurableBus::open(&path, SyncMode::Always).unwrap();
        assert_eq!(bus.tail(&admin()), 5);
        assert_eq!(bus.read(&admin(), 0, 5).unwrap(), written);
    }

    #[test]
    fn torn_final_record_is_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bus.log");
        {
            let bus = DurableBus::open(&path, SyncMode::Always).unwrap();
            for i in 0..5 {
                bus.append(&admin(), Payload::mail("u", format!("message {i}")))
                    .unwrap();
            }
        }
        let len = std::fs::metadata(&path).unwrap().len();
        OpenOptions::new()
            .write(true)
            .open(&path)
            .unwrap()
            .set_len(len - 7)
            .unwrap();
        let bus = DurableBus::open(&path, SyncMode::Always).unwrap();
        assert_eq!(bus.tail(&admin()), 4);
        // The next append lands at the repaired tail.
        assert_eq!(bus.append(&admin(), Payload::mail("u", "again")).unwrap(), 4);
    }

    #[test]
    fn corrupt_middle_record_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bus.log");
        {
            let bus = DurableBus::open(&path, SyncMode::Always).unwrap();
            for i in 0..3 {
                bus.append(&admin(), Payload::mail("u", format!("message {i}")))
                    .unwrap();
            }
        }
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[HEADER_LEN + 30] ^= 0x55;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            DurableBus::open(&path, SyncMode::Always),
            Err(BusError::CorruptLog { .. })
        ));
    }

    #[test]
    fn foreign_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bus.log");
        std::fs::write(&path, b"hello world, not a bus").unwrap();
        assert!(matches!(
            DurableBus::open(&path, SyncMode::Always),
            Err(BusError::CorruptLog { offset: 0, .. })
        ));
    }

    #[test]
    fn two_handles_share_one_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bus.log");
        let a = DurableBus::open(&path, SyncMode::Always).unwrap();
        let b = DurableBus::open(&path, SyncMode::Always).unwrap();
        assert_eq!(a.append(&admin(), Payload::mail("a", "1")).unwrap(), 0);
        assert_eq!(b.append(&admin(), Payload::mail("b", "2")).unwrap(), 1);
        assert_eq!(a.append(&admin(), Payload::mail("a", "3")).unwrap(), 2);
        assert_eq!(a.read(&admin(), 0, 3).unwrap(), b.read(&admin(), 0, 3).unwrap());
        let got = b
            .poll(
                &admin(),
                2,
                TypeSet::of(&[PayloadType::Mail]),
                Duration::from_millis(100),
            )
            .unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].position, 2);
    }

    #[test]
    fn batched_mode_flushes_on_drop() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bus.log");
        {
            let bus = DurableBus::open(&path, SyncMode::batched()).unwrap();
            for i in 0..20 {
                bus.append(&admin(), Payload::mail("u", format!("{i}"))).unwrap();
            }
        }
        let bus = DurableBus::open(&path, SyncMode::Always).unwrap();
        assert_eq!(bus.tail(&admin()), 20);
    }

    #[test]
    fn storage_stats_account_bodies() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bus.log");
        let bus = DurableBus::open(&path, SyncMode::Always).unwrap();
        let p1 = Payload::mail("u", "abc");
        let p2 = Payload::commit(0);
        let expect = (p1.encode_body().len() + p2.encode_body().len()) as u64;
        bus.append(&admin(), p1).unwrap();
        bus.append(&admin(), p2).unwrap();
        let stats = bus.storage_stats().unwrap();
        assert_eq!(stats.records, 2);
        assert_eq!(stats.payload_bytes, expect);
        assert_eq!(stats.file_bytes, std::fs::metadata(&path).unwrap().len());
        assert_eq!(
            stats.file_bytes,
            HEADER_LEN as u64 + 2 * (record::FRAME_PREFIX + record::FIXED_LEN) as u64 + expect
        );
    }
}
