use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use crate::acl::ClientIdentity;
use crate::entry::Entry;
use crate::error::BusError;
use crate::types::{Payload, TypeSet};
use crate::Position;

/// The shared-log API. All calls are checked against the caller's permissions.
pub trait AgentBus: Send + Sync {
    /// Appends `payload` and returns its position once it is recorded.
    fn append(&self, client: &ClientIdentity, payload: Payload) -> Result<Position, BusError>;

    /// Entries in `[start, end)` whose type the client may read. Unreadable
    /// entries are skipped; positions are never renumbered.
    fn read(
        &self,
        client: &ClientIdentity,
        start: Position,
        end: Position,
    ) -> Result<Vec<Entry>, BusError>;

    /// The next unassigned position.
    fn tail(&self, client: &ClientIdentity) -> Position;

    /// Waits until at least one entry at or after `start` matches `filter`,
    /// then returns every matching entry available. Empty on timeout.
    fn poll(
        &self,
        client: &ClientIdentity,
        start: Position,
        filter: TypeSet,
        timeout: Duration,
    ) -> Result<Vec<Entry>, BusError>;

    /// Rejects further appends and wakes every poller.
    fn close(&self);
}

pub type SharedBus = Arc<dyn AgentBus>;

/// A bus handle bound to one identity.
#[derive(Clone)]
pub struct BusClient {
    bus: SharedBus,
    identity: ClientIdentity,
}

impl BusClient {
    pub fn new(bus: SharedBus, identity: ClientIdentity) -> Self {
        BusClient { bus, identity }
    }

    pub fn identity(&self) -> &ClientIdentity {
        &self.identity
    }

    pub fn bus(&self) -> &SharedBus {
        &self.bus
    }

    pub fn append(&self, payload: Payload) -> Result<Position, BusError> {
        self.bus.append(&self.identity, payload)
    }

    pub fn read(&self, start: Position, end: Position) -> Result<Vec<Entry>, BusError> {
        self.bus.read(&self.identity, start, end)
    }

    pub fn read_from(&self, start: Position) -> Result<Vec<Entry>, BusError> {
        let tail = self.tail();
        self.bus.read(&self.identity, start.min(tail), tail)
    }

    pub fn tail(&self) -> Position {
        self.bus.tail(&self.identity)
    }

    pub fn poll(
        &self,
        start: Position,
        filter: TypeSet,
        timeout: Duration,
    ) -> Result<Vec<Entry>, BusError> {
        self.bus.poll(&self.identity, start, filter, timeout)
    }
}

impl std::fmt::Debug for BusClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BusClient")
            .field("client_id", &self.identity.client_id)
            .finish()
    }
}

/// Ordered in-memory index shared by both backends.
pub(crate) struct LogCore {
    state: Mutex<CoreState>,
    cond: Condvar,
}

pub(crate) struct CoreState {
    pub entries: Vec<Entry>,
    pub closed: bool,
    last_ts: u64,
}

impl CoreState {
    /// Backend timestamp, clamped so it never runs backwards.
    pub fn stamp(&mut self, now_ms: u64) -> u64 {
        self.last_ts = self.last_ts.max(now_ms);
        self.last_ts
    }

    pub fn tail(&self) -> Position {
        self.entries.len() as Position
    }

    pub fn push(&mut self, entry: Entry) {
        debug_assert_eq!(entry.position, self.tail());
        self.last_ts = self.last_ts.max(entry.realtime_ts);
        self.entries.push(entry);
    }
}

impl LogCore {
    pub fn new() -> Self {
        LogCore {
            state: Mutex::new(CoreState {
                entries: Vec::new(),
                closed: false,
                last_ts: 0,
            }),
            cond: Condvar::new(),
        }
    }

    pub fn lock(&self) -> MutexGuard<'_, CoreState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn notify(&self) {
        self.cond.notify_all();
    }

    pub fn close(&self) {
        self.lock().closed = true;
        self.notify();
    }

    pub fn tail(&self) -> Position {
        self.lock().tail()
    }

    pub fn read(
        &self,
        client: &ClientIdentity,
        start: Position,
        end: Position,
    ) -> Result<Vec<Entry>, BusError> {
        if start > end {
            return Err(BusError::InvalidRange { start, end });
        }
        let state = self.lock();
        let hi = end.min(state.tail()) as usize;
        let lo = (start as usize).min(hi);
        Ok(state.entries[lo..hi]
            .iter()
            .filter(|e| client.permissions.can_read(e.payload_type()))
            .cloned()
            .collect())
    }

    /// Blocking poll. `refresh` pulls in entries appended by other processes
    /// and is retried every `refresh_every` while waiting.
    pub fn poll(
        &self,
        client: &ClientIdentity,
        start: Position,
        filter: TypeSet,
        timeout: Duration,
        refresh: &dyn Fn() -> Result<(), BusError>,
        refresh_every: Option<Duration>,
    ) -> Result<Vec<Entry>, BusError> {
        client.check_poll(filter)?;
        let deadline = Instant::now() + timeout;
        loop {
            refresh()?;
            let mut state = self.lock();
            loop {
                let found: Vec<Entry> = state
                    .entries
                    .iter()
                    .skip(start as usize)
                    .filter(|e| filter.contains(e.payload_type()))
                    .cloned()
                    .collect();
                if !found.is_empty() || state.closed {
                    return Ok(found);
                }
                let now = Instant::now();
                if now >= deadline {
                    return Ok(Vec::new());
                }
                let mut wait = deadline - now;
                if let Some(every) = refresh_every {
                    wait = wait.min(every);
                }
                let before = state.tail();
                let (guard, res) = self
                    .cond
                    .wait_timeout(state, wait)
                    .unwrap_or_else(|e| e.into_inner());
                state = guard;
                if res.timed_out() && state.tail() == before && refresh_every.is_some() {
                    break;
                }
            }
        }
    }
}
