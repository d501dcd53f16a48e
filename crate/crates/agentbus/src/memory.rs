use std::sync::Arc;
use std::time::Duration;

use crate::acl::ClientIdentity;
use crate::bus::{AgentBus, LogCore};
use crate::clock::{Clock, SystemClock};
use crate::entry::Entry;
use crate::error::BusError;
use crate::types::{Payload, TypeSet};
use crate::Position;

/// Non-durable backend. Appends are atomic under one lock.
pub struct MemoryBus {
    core: LogCore,
    clock: Arc<dyn Clock>,
}

impl MemoryBus {
    pub fn new() -> Self {
        Self::with_clock(Arc::new(SystemClock))
    }

    pub fn with_clock(clock: Arc<dyn Clock>) -> Self {
        MemoryBus {
            core: LogCore::new(),
            clock,
        }
    }

    /// Every entry regardless of type; for tooling that owns the bus.
    pub fn snapshot_entries(&self) -> Vec<Entry> {
        self.core.lock().entries.clone()
    }
}

impl Default for MemoryBus {
    fn default() -> Self {
        Self::new()
    }
}

impl AgentBus for MemoryBus {
    fn append(&self, client: &ClientIdentity, payload: Payload) -> Result<Position, BusError> {
        client.check_append(payload.payload_type())?;
        let mut state = self.core.lock();
        if state.closed {
            return Err(BusError::BusClosed);
        }
        let position = state.tail();
        let realtime_ts = state.stamp(self.clock.now_ms());
        state.push(Entry {
            position,
            realtime_ts,
            payload,
        });
        drop(state);
        self.core.notify();
        Ok(position)
    }

    fn read(
        &self,
        client: &ClientIdentity,
        start: Position,
        end: Position,
    ) -> Result<Vec<Entry>, BusError> {
        self.core.read(client, start, end)
    }

    fn tail(&self, _client: &ClientIdentity) -> Position {
        self.core.tail()
    }

    fn poll(
        &self,
        client: &ClientIdentity,
        start: Position,
        filter: TypeSet,
        timeout: Duration,
    ) -> Result<Vec<Entry>, BusError> {
        self.core
            .poll(client, start, filter, timeout, &|| Ok(()), None)
    }

    fn close(&self) {
        self.core.close();
    }
}
