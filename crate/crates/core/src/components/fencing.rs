//! Driver epochs.
//!
//! Each driver election on the log carries a declared epoch. Its effective
//! epoch is `max(declared, previous effective + 1)`, so a later election
//! always supersedes an earlier one even when two candidates raced and
//! declared the same number. An entry stamped with a driver epoch is valid
//! only if that epoch equals the effective epoch of the latest election
//! before the entry's position; with no election before it, epoch 0.

use agentbus::{Entry, Payload, PolicyKind, Position};
use serde::{Deserialize, Serialize};

use crate::policy::{parse_policy_value, DriverElection, PolicyDocument};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochTracker {
    /// (position, effective epoch), in log order.
    elections: Vec<(Position, u64)>,
}

/// The election carried by `entry`, if it is a well-formed one.
pub fn election_of(entry: &Entry) -> Option<DriverElection> {
    let Payload::Policy(p) = &entry.payload else {
        return None;
    };
    if p.kind != PolicyKind::DriverElection {
        return None;
    }
    match parse_policy_value(&p.body) {
        Ok(PolicyDocument::DriverElection(e)) => Some(e),
        _ => {
            tracing::warn!(position = entry.position, "ignoring malformed driver election");
            None
        }
    }
}

impl EpochTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records an election and returns its effective epoch. Re-observing a
    /// position already folded returns the recorded epoch.
    pub fn observe(&mut self, position: Position, declared: u64) -> u64 {
        if let Some(&(_, eff)) = self.elections.iter().find(|(p, _)| *p == position) {
            return eff;
        }
        debug_assert!(self.elections.last().is_none_or(|(p, _)| *p < position));
        let eff = declared.max(self.current() + 1);
        self.elections.push((position, eff));
        eff
    }

    /// Folds `entry` if it is an election.
    pub fn observe_entry(&mut self, entry: &Entry) -> Option<u64> {
        election_of(entry).map(|e| self.observe(entry.position, e.epoch))
    }

    /// Effective epoch of the latest election folded so far.
    pub fn current(&self) -> u64 {
        self.elections.last().map_or(0, |(_, e)| *e)
    }

    /// The epoch in force for an entry at `position`.
    pub fn epoch_at(&self, position: Position) -> u64 {
        self.elections
            .iter()
            .take_while(|(p, _)| *p < position)
            .last()
            .map_or(0, |(_, e)| *e)
    }

    pub fn is_valid(&self, position: Position, driver_epoch: u64) -> bool {
        self.epoch_at(position) == driver_epoch
    }

    pub fn latest_election(&self) -> Option<Position> {
        self.elections.last().map(|(p, _)| *p)
    }

    pub fn epoch_of_election(&self, position: Position) -> Option<u64> {
        self.elections
            .iter()
            .find(|(p, _)| *p == position)
            .map(|(_, e)| *e)
    }

    /// The epoch the next election should declare.
    pub fn next_epoch(&self) -> u64 {
        self.current() + 1
    }
}
