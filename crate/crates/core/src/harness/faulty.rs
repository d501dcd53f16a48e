//! A bus wrapper that records who appended what and kills clients on cue.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Mutex, MutexGuard};
use std::time::Duration;

use agentbus::{
    AgentBus, BusClient, BusError, ClientIdentity, Entry, Payload, PayloadType, Position,
    SharedBus, TypeSet,
};

use crate::components::elect_driver;
use crate::roles::Role;

/// One successful append.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppendRecord {
    pub position: Position,
    pub client: ClientIdentity,
    pub payload_type: PayloadType,
}

#[derive(Default)]
struct State {
    appends_by: BTreeMap<String, u64>,
    /// Kill a client right after its n-th append from arming.
    armed: BTreeMap<String, u64>,
    killed: BTreeSet<String>,
    records: Vec<AppendRecord>,
    /// (victim, usurper id)
    usurp: Option<(String, String)>,
    /// (usurper id, election position), until collected.
    usurped: Option<(String, Position)>,
    denied: Vec<(String, PayloadType)>,
}

pub struct FaultyBus {
    inner: SharedBus,
    state: Mutex<State>,
}

impl FaultyBus {
    pub fn new(inner: SharedBus) -> Self {
        FaultyBus {
            inner,
            state: Mutex::new(State::default()),
        }
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn inner(&self) -> &SharedBus {
        &self.inner
    }

    /// Kills `client_id` right after its `count`-th append from now;
    /// `count == 0` kills it at once.
    pub fn arm_kill(&self, client_id: &str, count: u64) {
        let mut s = self.lock();
        if count == 0 {
            s.killed.insert(client_id.to_string());
        } else {
            let base = s.appends_by.get(client_id).copied().unwrap_or(0);
            s.armed.insert(client_id.to_string(), base + count);
        }
    }

    pub fn kill(&self, client_id: &str) {
        self.lock().killed.insert(client_id.to_string());
    }

    pub fn revive(&self, client_id: &str) {
        let mut s = self.lock();
        s.killed.remove(client_id);
        s.armed.remove(client_id);
    }

    pub fn is_killed(&self, client_id: &str) -> bool {
        self.lock().killed.contains(client_id)
    }

    /// Elects `usurper` just before `victim`'s next Intent append.
    pub fn arm_usurp(&self, victim: &str, usurper: &str) {
        self.lock().usurp = Some((victim.to_string(), usurper.to_string()));
    }

    pub fn take_usurped(&self) -> Option<(String, Position)> {
        self.lock().usurped.take()
    }

    pub fn records(&self) -> Vec<AppendRecord> {
        self.lock().records.clone()
    }

    /// Appends refused by the access check, in order.
    pub fn denied(&self) -> Vec<(String, PayloadType)> {
        self.lock().denied.clone()
    }

    fn check_alive(&self, client: &ClientIdentity) -> Result<(), BusError> {
        if self.lock().killed.contains(&client.client_id) {
            Err(BusError::Fault(format!("client `{}` was killed", client.client_id)))
        } else {
            Ok(())
        }
    }
}

impl AgentBus for FaultyBus {
    fn append(&self, client: &ClientIdentity, payload: Payload) -> Result<Position, BusError> {
        let mut s = self.lock();
        let id = &client.client_id;
        if s.killed.contains(id) {
            return Err(BusError::Fault(format!("client `{id}` was killed")));
        }
        let ty = payload.payload_type();
        if ty == PayloadType::Intent && s.usurp.as_ref().is_some_and(|(v, _)| v == id) {
            let (_, usurper) = s.usurp.take().expect("checked above");
            let rival = BusClient::new(self.inner.clone(), Role::Driver.identity(&usurper));
            let (pos, _) = elect_driver(&rival, &usurper)?;
            s.records.push(AppendRecord {
                position: pos,
                client: rival.identity().clone(),
                payload_type: PayloadType::Policy,
            });
            s.usurped = Some((usurper, pos));
        }
        let pos = match self.inner.append(client, payload) {
            Ok(p) => p,
            Err(e) => {
                if e.is_permission_denied() {
                    s.denied.push((id.clone(), ty));
                }
                return Err(e);
            }
        };
        s.records.push(AppendRecord {
            position: pos,
            client: client.clone(),
            payload_type: ty,
        });
        let n = s.appends_by.entry(id.clone()).or_insert(0);
        *n += 1;
        let n = *n;
        if s.armed.get(id) == Some(&n) {
            s.armed.remove(id);
            s.killed.insert(id.clone());
        }
        Ok(pos)
    }

    fn read(&self, client: &ClientIdentity, start: Position, end: Position) -> Result<Vec<Entry>, BusError> {
        self.check_alive(client)?;
        self.inner.read(client, start, end)
    }

    fn tail(&self, client: &ClientIdentity) -> Position {
        self.inner.tail(client)
    }

    fn poll(
        &self,
        client: &ClientIdentity,
        start: Position,
        filter: TypeSet,
        timeout: Duration,
    ) -> Result<Vec<Entry>, BusError> {
        self.check_alive(client)?;
        self.inner.poll(client, start, filter, timeout)
    }

    fn close(&self) {
        self.inner.close();
    }
}
