//! The four components of the agent state machine.
//!
//! Every component follows the same shape: play the entries it is interested
//! in (a pure fold into its state), then act at the tail by appending what the
//! folded state calls for. Because acting only ever depends on the folded
//! state, a restarted component that replays the log (optionally from a
//! snapshot) resumes exactly where its predecessor stopped.

mod decider;
mod driver;
mod executor;
mod fencing;
mod voter;

use std::sync::Arc;
use std::time::Duration;

use agentbus::{
    BusClient, BusError, Clock, Entry, Position, Snapshot, SnapshotError, SnapshotStore, TypeSet,
};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::roles::Role;

pub use decider::{Decider, DeciderState, PendingDecision, DEFAULT_VOTE_TIMEOUT};
pub use driver::{elect_driver, Driver, DriverSettings, DriverState, Phase};
pub use executor::{
    ActionOutcome, Executor, ExecutorState, Sandbox, SandboxError, SideEffectHook,
};
pub use fencing::{election_of, EpochTracker};
pub use voter::{
    Ballot, BehaviorConfig, LlmVoterConfig, Pattern, Rule, RuleScope, RuleSet, VoteBehavior,
    VoteContext, Voter, VoterError, VoterState,
};

#[derive(Debug, Error)]
pub enum ComponentError {
    #[error("fenced: a newer driver was elected at position {position}")]
    Fenced { position: Position },
    #[error("killed during an action")]
    Killed,
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error("configuration error: {0}")]
    Config(String),
}

impl ComponentError {
    /// Errors after which the component must not continue.
    pub fn is_terminal(&self) -> bool {
        matches!(
            self,
            ComponentError::Fenced { .. }
                | ComponentError::Killed
                | ComponentError::Bus(BusError::Fault(_))
                | ComponentError::Bus(BusError::BusClosed)
        )
    }
}

/// What one step did.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepOutcome {
    /// Entries of interest folded into the state.
    pub played: usize,
    /// Entries this component appended.
    pub appended: usize,
}

impl StepOutcome {
    pub fn progressed(&self) -> bool {
        self.played > 0 || self.appended > 0
    }
}

pub trait Component: Send {
    fn id(&self) -> &str;
    fn role(&self) -> Role;

    /// Plays everything up to the tail, then acts. With a non-zero `wait`
    /// the step blocks up to that long for new entries when there is
    /// nothing to play.
    fn step(&mut self, wait: Duration) -> Result<StepOutcome, ComponentError>;

    /// Clock time at which the component has work even without new entries.
    fn next_deadline(&self) -> Option<u64> {
        None
    }

    fn played_up_to(&self) -> Position;

    /// The folded state, for audits and differential checks.
    fn state_json(&self) -> serde_json::Value;
}

/// Reads the entries after `start`, waiting on `wake` when there are none.
/// Returns the entries of `interest` and the new play position.
pub(crate) fn fetch(
    client: &BusClient,
    start: Position,
    interest: TypeSet,
    wake: TypeSet,
    wait: Duration,
) -> Result<(Vec<Entry>, Position), BusError> {
    let mut tail = client.tail();
    if tail <= start && !wait.is_zero() {
        client.poll(start, wake, wait)?;
        tail = client.tail();
    }
    if tail <= start {
        return Ok((Vec::new(), start));
    }
    let entries = client
        .read(start, tail)?
        .into_iter()
        .filter(|e| interest.contains(e.payload_type()))
        .collect();
    Ok((entries, tail))
}

/// Periodic snapshots of a component's folded state.
pub struct Snapshotter {
    store: Arc<dyn SnapshotStore>,
    every: u64,
    last: Position,
}

impl Snapshotter {
    pub fn new(store: Arc<dyn SnapshotStore>, every: u64) -> Self {
        Snapshotter {
            store,
            every: every.max(1),
            last: 0,
        }
    }

    /// Loads the latest usable state for `id`. A damaged snapshot or one
    /// beyond the bus tail is discarded, which means a full replay.
    pub fn load<S: DeserializeOwned>(&mut self, id: &str, tail: Position) -> Option<S> {
        let snap = match self.store.get_latest(id) {
            Ok(Some(s)) => s,
            Ok(None) => return None,
            Err(e) => {
                tracing::warn!(component = id, error = %e, "ignoring snapshot, replaying from 0");
                return None;
            }
        };
        if snap.log_position > tail {
            let e = SnapshotError::BeyondTail {
                position: snap.log_position,
                tail,
            };
            tracing::warn!(component = id, error = %e, "ignoring snapshot, replaying from 0");
            return None;
        }
        match serde_json::from_slice(&snap.state) {
            Ok(s) => {
                self.last = snap.log_position;
                Some(s)
            }
            Err(e) => {
                tracing::warn!(component = id, error = %e, "undecodable snapshot, replaying from 0");
                None
            }
        }
    }

    pub fn maybe_put<S: Serialize>(
        &mut self,
        id: &str,
        played_up_to: Position,
        state: &S,
        now_ms: u64,
    ) -> Result<(), SnapshotError> {
        if played_up_to < self.last + self.every {
            return Ok(());
        }
        self.store.put(&Snapshot {
            component_id: id.to_string(),
            log_position: played_up_to,
            state: serde_json::to_vec(state).expect("component state serializes"),
            created_ts: now_ms,
        })?;
        self.last = played_up_to;
        Ok(())
    }
}

/// Shared construction parameters.
#[derive(Clone)]
pub struct ComponentContext {
    pub client: BusClient,
    pub clock: Arc<dyn Clock>,
    pub snapshots: Option<(Arc<dyn SnapshotStore>, u64)>,
}

impl ComponentContext {
    pub fn new(client: BusClient, clock: Arc<dyn Clock>) -> Self {
        ComponentContext {
            client,
            clock,
            snapshots: None,
        }
    }

    pub fn with_snapshots(mut self, store: Arc<dyn SnapshotStore>, every: u64) -> Self {
        self.snapshots = Some((store, every));
        self
    }

    pub fn id(&self) -> &str {
        &self.client.identity().client_id
    }

    pub(crate) fn snapshotter(&self) -> Option<Snapshotter> {
        self.snapshots
            .as_ref()
            .map(|(store, every)| Snapshotter::new(store.clone(), *every))
    }
}
