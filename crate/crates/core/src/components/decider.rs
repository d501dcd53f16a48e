use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use agentbus::{Entry, Payload, PayloadType as T, PolicyKind, Position, TypeSet, VoteBody};
use serde::{Deserialize, Serialize};

use super::fencing::{election_of, EpochTracker};
use super::{fetch, Component, ComponentContext, ComponentError, Snapshotter, StepOutcome};
use crate::policy::{parse_policy_value, DeciderPolicy, Decision, PolicyDocument};
use crate::roles::Role;

pub const DEFAULT_VOTE_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingDecision {
    /// The policy in force at the intent's position.
    pub policy: DeciderPolicy,
    pub votes: Vec<VoteBody>,
    pub deadline_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeciderState {
    pub policy: DeciderPolicy,
    pub pending: BTreeMap<Position, PendingDecision>,
    pub decided: BTreeSet<Position>,
    pub timeout_ms: u64,
    pub elections: EpochTracker,
    pub played_up_to: Position,
}

impl DeciderState {
    pub fn new(initial: DeciderPolicy, timeout: Duration) -> Self {
        DeciderState {
            policy: initial,
            pending: BTreeMap::new(),
            decided: BTreeSet::new(),
            timeout_ms: timeout.as_millis() as u64,
            elections: EpochTracker::new(),
            played_up_to: 0,
        }
    }

    pub fn replay<'a>(
        initial: DeciderPolicy,
        timeout: Duration,
        entries: impl IntoIterator<Item = &'a Entry>,
    ) -> Self {
        let mut s = Self::new(initial, timeout);
        for e in entries {
            s.apply(e);
            s.played_up_to = e.position + 1;
        }
        s
    }

    pub fn apply(&mut self, e: &Entry) {
        let pos = e.position;
        match &e.payload {
            Payload::Intent(i)
                if self.elections.is_valid(pos, i.driver_epoch) && !self.decided.contains(&pos) =>
            {
                self.pending.insert(
                    pos,
                    PendingDecision {
                        policy: self.policy.clone(),
                        votes: Vec::new(),
                        deadline_ms: e.realtime_ts + self.timeout_ms,
                    },
                );
            }
            Payload::Vote(v) => {
                if let Some(p) = self.pending.get_mut(&v.intent_position) {
                    p.votes.push(v.clone());
                }
            }
            Payload::Commit(c) => self.settle(c.intent_position),
            Payload::Abort(a) => self.settle(a.intent_position),
            Payload::Policy(p) => match p.kind {
                PolicyKind::DriverElection => {
                    if let Some(el) = election_of(e) {
                        self.elections.observe(pos, el.epoch);
                    }
                }
                PolicyKind::Decider => match parse_policy_value(&p.body) {
                    Ok(PolicyDocument::Decider(policy)) => self.policy = policy,
                    Ok(_) => tracing::warn!(position = pos, "decider policy with a foreign body"),
                    Err(err) => tracing::warn!(position = pos, error = %err, "ignoring decider policy"),
                },
                PolicyKind::Voter => {}
            },
            _ => {}
        }
    }

    fn settle(&mut self, intent: Position) {
        self.pending.remove(&intent);
        self.decided.insert(intent);
    }

    /// The decisions due at `now_ms`, in intent order.
    pub fn due(&self, now_ms: u64) -> Vec<(Position, Decision)> {
        self.pending
            .iter()
            .filter_map(|(pos, p)| match p.policy.evaluate(&p.votes) {
                Decision::Undecided if now_ms >= p.deadline_ms => Some((
                    *pos,
                    Decision::Abort(format!(
                        "timeout: {} undecided after {} ms with {} vote(s)",
                        p.policy,
                        self.timeout_ms,
                        p.votes.len()
                    )),
                )),
                Decision::Undecided => None,
                d => Some((*pos, d)),
            })
            .collect()
    }
}

pub struct Decider {
    ctx: ComponentContext,
    state: DeciderState,
    snapshots: Option<Snapshotter>,
}

impl Decider {
    /// `initial` governs until the first decider policy on the log.
    pub fn new(ctx: ComponentContext, initial: DeciderPolicy, timeout: Duration) -> Self {
        let mut snapshots = ctx.snapshotter();
        let state = snapshots
            .as_mut()
            .and_then(|s| s.load::<DeciderState>(ctx.id(), ctx.client.tail()))
            .unwrap_or_else(|| DeciderState::new(initial, timeout));
        Decider {
            ctx,
            state,
            snapshots,
        }
    }

    pub fn state(&self) -> &DeciderState {
        &self.state
    }

    pub fn catch_up(&mut self) -> Result<usize, ComponentError> {
        let (entries, end) = fetch(
            &self.ctx.client,
            self.state.played_up_to,
            Self::interest(),
            Self::interest(),
            Duration::ZERO,
        )?;
        for e in &entries {
            self.state.apply(e);
        }
        self.state.played_up_to = end;
        Ok(entries.len())
    }

    fn interest() -> TypeSet {
        TypeSet::of(&[T::Intent, T::Vote, T::Commit, T::Abort, T::Policy])
    }
}

impl Component for Decider {
    fn id(&self) -> &str {
        self.ctx.id()
    }

    fn role(&self) -> Role {
        Role::Decider
    }

    fn step(&mut self, wait: Duration) -> Result<StepOutcome, ComponentError> {
        let wait = match self.next_deadline() {
            Some(d) => wait.min(Duration::from_millis(d.saturating_sub(self.ctx.clock.now_ms()))),
            None => wait,
        };
        let (entries, end) = fetch(
            &self.ctx.client,
            self.state.played_up_to,
            Self::interest(),
            Self::interest(),
            wait,
        )?;
        for e in &entries {
            self.state.apply(e);
        }
        self.state.played_up_to = end;
        if let Some(s) = self.snapshots.as_mut() {
            s.maybe_put(self.ctx.id(), end, &self.state, self.ctx.clock.now_ms())?;
        }
        let mut appended = 0;
        for (pos, decision) in self.state.due(self.ctx.clock.now_ms()) {
            let payload = match decision {
                Decision::Commit => Payload::commit(pos),
                Decision::Abort(reason) => Payload::abort(pos, reason),
                Decision::Undecided => continue,
            };
            self.ctx.client.append(payload)?;
            appended += 1;
        }
        Ok(StepOutcome {
            played: entries.len(),
            appended,
        })
    }

    fn next_deadline(&self) -> Option<u64> {
        self.state.pending.values().map(|p| p.deadline_ms).min()
    }

    fn played_up_to(&self) -> Position {
        self.state.played_up_to
    }

    fn state_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.state).expect("decider state serializes")
    }
}
