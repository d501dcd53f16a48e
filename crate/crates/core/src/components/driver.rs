use std::sync::Arc;
use std::time::Duration;

use agentbus::{
    BusClient, BusError, Entry, InfInBody, InfOutBody, Message, MessageRole, Payload,
    PayloadType as T, Position, ResultStatus, TypeSet,
};
use serde::{Deserialize, Serialize};

use super::fencing::{election_of, EpochTracker};
use super::{fetch, Component, ComponentContext, ComponentError, Snapshotter, StepOutcome};
use crate::inference::{extract_intent, Conversation, InferenceAdapter};
use crate::policy::{DriverElection, PolicyDocument};
use crate::roles::Role;

fn default_attempts() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    100
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriverSettings {
    #[serde(default)]
    pub system_prompt: String,
    /// Inference attempts per turn before giving up.
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    /// First retry delay; doubles on each further attempt.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

impl Default for DriverSettings {
    fn default() -> Self {
        DriverSettings {
            system_prompt: String::new(),
            max_attempts: default_attempts(),
            backoff_ms: default_backoff_ms(),
        }
    }
}

impl DriverSettings {
    pub fn with_system_prompt(prompt: impl Into<String>) -> Self {
        DriverSettings {
            system_prompt: prompt.into(),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Quiescent: the next buffered input starts a turn.
    #[default]
    Idle,
    /// An InfIn has been logged without its InfOut.
    Inferring,
    /// An InfOut with an action has been logged without its Intent.
    Extracting,
    /// An Intent is in flight.
    Waiting,
}

/// The driver's fold over the log. Everything here is a function of the log
/// prefix `[0, played_up_to)`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriverState {
    pub conversation: Conversation,
    pub phase: Phase,
    pub pending_intent: Option<Position>,
    /// Whether a Commit for the pending intent has been played; a later
    /// Abort for it lost the race and is ignored.
    pub pending_committed: bool,
    /// Mail and results not yet sent to inference.
    pub buffered_mail: Vec<Message>,
    /// InfIn entries played.
    pub turn: u64,
    /// Live epoch according to the log.
    pub epoch: u64,
    pub elections: EpochTracker,
    pub played_up_to: Position,
}

impl DriverState {
    /// The state after playing `entries` from an empty log.
    pub fn replay<'a>(entries: impl IntoIterator<Item = &'a Entry>) -> DriverState {
        let mut s = DriverState::default();
        for e in entries {
            s.apply(e);
            s.played_up_to = e.position + 1;
        }
        s
    }

    fn resolve(&mut self, note: String) {
        self.buffered_mail.push(Message::tool(note));
        self.pending_intent = None;
        self.pending_committed = false;
        self.phase = Phase::Idle;
    }

    /// Folds one entry. Returns the effective epoch if it was an election.
    pub fn apply(&mut self, e: &Entry) -> Option<u64> {
        let pos = e.position;
        match &e.payload {
            Payload::Policy(_) => {
                let election = election_of(e)?;
                let eff = self.elections.observe(pos, election.epoch);
                self.epoch = eff;
                return Some(eff);
            }
            Payload::Mail(m) => self
                .buffered_mail
                .push(Message::user(format!("[mail from {}]\n{}", m.sender, m.body))),
            Payload::InfIn(b) if self.elections.is_valid(pos, b.driver_epoch) => {
                self.consume_delta(pos, &b.delta);
                self.turn += 1;
                self.phase = Phase::Inferring;
            }
            Payload::InfOut(b) if self.elections.is_valid(pos, b.driver_epoch) => {
                self.conversation.push(Message::assistant(b.text.clone()));
                self.phase = if b.intent_extracted {
                    Phase::Extracting
                } else {
                    Phase::Idle
                };
            }
            Payload::Intent(b) if self.elections.is_valid(pos, b.driver_epoch) => {
                self.pending_intent = Some(pos);
                self.pending_committed = false;
                self.phase = Phase::Waiting;
            }
            Payload::Commit(c) if self.pending_intent == Some(c.intent_position) => {
                self.pending_committed = true;
            }
            Payload::Abort(a)
                if self.pending_intent == Some(a.intent_position) && !self.pending_committed =>
            {
                self.resolve(format!("[intent @{} aborted: {}]", a.intent_position, a.reason));
            }
            Payload::Result(r) => match (r.intent_position, self.pending_intent) {
                (Some(p), Some(pending)) if p == pending => {
                    let status = match r.status {
                        ResultStatus::Ok => "ok",
                        ResultStatus::Error => "error",
                        ResultStatus::Recovery => "recovery",
                    };
                    self.resolve(format!("[result of intent @{p}: {status}]\n{}", r.output));
                }
                // An intent not yet committed cannot have been started by
                // the old executor; the new one will run it.
                (None, Some(pending)) if r.status == ResultStatus::Recovery && self.pending_committed => {
                    self.resolve(format!(
                        "[executor restarted at @{pos}; outcome of intent @{pending} unknown]\n{}",
                        r.output
                    ));
                }
                _ => {}
            },
            _ => {}
        }
        None
    }

    fn consume_delta(&mut self, pos: Position, delta: &[Message]) {
        self.conversation.extend(delta.iter().cloned());
        let inputs: Vec<&Message> = delta
            .iter()
            .filter(|m| m.role != MessageRole::System)
            .collect();
        let k = inputs.len().min(self.buffered_mail.len());
        let matches = inputs.len() <= self.buffered_mail.len()
            && inputs.iter().zip(&self.buffered_mail).all(|(a, b)| *a == b);
        if !matches {
            tracing::warn!(position = pos, "InfIn delta does not match buffered input");
        }
        self.buffered_mail.drain(..k);
    }
}

/// Appends an election for `candidate` declaring the next epoch, and returns
/// its position and declared epoch.
pub fn elect_driver(client: &BusClient, candidate: &str) -> Result<(Position, u64), BusError> {
    let mut tracker = EpochTracker::new();
    for e in client.read_from(0)? {
        tracker.observe_entry(&e);
    }
    elect_with(client, candidate, tracker.next_epoch())
}

fn elect_with(client: &BusClient, candidate: &str, epoch: u64) -> Result<(Position, u64), BusError> {
    let doc = PolicyDocument::DriverElection(DriverElection {
        epoch,
        candidate: candidate.to_string(),
    });
    let pos = client.append(doc.to_payload(candidate))?;
    Ok((pos, epoch))
}

pub struct Driver {
    ctx: ComponentContext,
    adapter: Arc<dyn InferenceAdapter>,
    settings: DriverSettings,
    state: DriverState,
    /// Position of this instance's own election.
    election: Option<Position>,
    epoch: Option<u64>,
    fenced: Option<Position>,
    snapshots: Option<Snapshotter>,
}

impl Driver {
    /// A driver that replays from its latest snapshot (if any) and elects
    /// itself on its first step.
    pub fn new(ctx: ComponentContext, adapter: Arc<dyn InferenceAdapter>, settings: DriverSettings) -> Self {
        let mut snapshots = ctx.snapshotter();
        let state = snapshots
            .as_mut()
            .and_then(|s| s.load(ctx.id(), ctx.client.tail()))
            .unwrap_or_default();
        Driver {
            ctx,
            adapter,
            settings,
            state,
            election: None,
            epoch: None,
            fenced: None,
            snapshots,
        }
    }

    /// Takes over an election already on the log instead of appending one.
    pub fn adopt_election(mut self, position: Position) -> Self {
        self.election = Some(position);
        self
    }

    pub fn state(&self) -> &DriverState {
        &self.state
    }

    pub fn epoch(&self) -> Option<u64> {
        self.epoch
    }

    pub fn is_fenced(&self) -> bool {
        self.fenced.is_some()
    }

    /// Plays to the tail without acting.
    pub fn catch_up(&mut self) -> Result<usize, ComponentError> {
        let (entries, end) = fetch(
            &self.ctx.client,
            self.state.played_up_to,
            Self::interest(),
            Self::interest(),
            Duration::ZERO,
        )?;
        for e in &entries {
            self.play(e);
        }
        self.state.played_up_to = end;
        Ok(entries.len())
    }

    fn interest() -> TypeSet {
        TypeSet::of(&[
            T::Mail,
            T::InfIn,
            T::InfOut,
            T::Intent,
            T::Commit,
            T::Abort,
            T::Result,
            T::Policy,
        ])
    }

    fn wake() -> TypeSet {
        Role::Driver.permissions().pollable
    }

    fn play(&mut self, e: &Entry) {
        if let Some(eff) = self.state.apply(e) {
            match self.election {
                Some(mine) if mine == e.position => self.epoch = Some(eff),
                Some(mine) if e.position > mine && self.fenced.is_none() => {
                    tracing::info!(driver = self.ctx.id(), position = e.position, "fenced by a newer election");
                    self.fenced = Some(e.position);
                }
                _ => {}
            }
        }
    }

    fn infer(&self, conversation: &[Message]) -> String {
        let mut delay = Duration::from_millis(self.settings.backoff_ms);
        let attempts = self.settings.max_attempts.max(1);
        let mut last_err = String::new();
        for attempt in 1..=attempts {
            match self.adapter.infer(conversation) {
                Ok(text) => return text,
                Err(e) => {
                    tracing::warn!(driver = self.ctx.id(), attempt, error = %e, "inference failed");
                    last_err = e.to_string();
                    if attempt < attempts {
                        self.ctx.clock.sleep(delay);
                        delay *= 2;
                    }
                }
            }
        }
        format!("[inference failed after {attempts} attempts: {last_err}]")
    }

    /// Infers over `conversation`, then logs the output and any intent.
    fn complete_turn(&self, conversation: &[Message], turn: u64, epoch: u64) -> Result<usize, BusError> {
        let text = self.infer(conversation);
        let extraction = extract_intent(&text);
        for w in &extraction.warnings {
            tracing::warn!(driver = self.ctx.id(), warning = %w, "action extraction");
        }
        let client = &self.ctx.client;
        client.append(Payload::InfOut(InfOutBody {
            text,
            intent_extracted: extraction.action.is_some(),
            driver_epoch: epoch,
        }))?;
        match extraction.action {
            Some(action) => {
                client.append(Payload::intent(action, epoch, turn))?;
                Ok(2)
            }
            None => Ok(1),
        }
    }

    fn act(&mut self, epoch: u64) -> Result<usize, BusError> {
        let s = &self.state;
        match s.phase {
            Phase::Waiting => Ok(0),
            Phase::Inferring => {
                let conv = s.conversation.messages().to_vec();
                self.complete_turn(&conv, s.turn, epoch)
            }
            Phase::Extracting => {
                let text = s
                    .conversation
                    .messages()
                    .last()
                    .map(|m| m.content.clone())
                    .unwrap_or_default();
                match extract_intent(&text).action {
                    Some(action) => {
                        self.ctx.client.append(Payload::intent(action, epoch, s.turn))?;
                        Ok(1)
                    }
                    None => {
                        tracing::error!(driver = self.ctx.id(), "logged output no longer yields an action");
                        Ok(0)
                    }
                }
            }
            Phase::Idle if s.buffered_mail.is_empty() => Ok(0),
            Phase::Idle => {
                let mut delta = Vec::new();
                if s.conversation.is_empty() && !self.settings.system_prompt.is_empty() {
                    delta.push(Message::system(self.settings.system_prompt.clone()));
                }
                delta.extend(s.buffered_mail.iter().cloned());
                let mut conv = s.conversation.messages().to_vec();
                conv.extend(delta.iter().cloned());
                let turn = s.turn + 1;
                self.ctx.client.append(Payload::InfIn(InfInBody {
                    delta,
                    driver_epoch: epoch,
                }))?;
                Ok(1 + self.complete_turn(&conv, turn, epoch)?)
            }
        }
    }
}

impl Component for Driver {
    fn id(&self) -> &str {
        self.ctx.id()
    }

    fn role(&self) -> Role {
        Role::Driver
    }

    fn step(&mut self, wait: Duration) -> Result<StepOutcome, ComponentError> {
        if let Some(position) = self.fenced {
            return Err(ComponentError::Fenced { position });
        }
        let (entries, end) = fetch(
            &self.ctx.client,
            self.state.played_up_to,
            Self::interest(),
            Self::wake(),
            wait,
        )?;
        for e in &entries {
            self.play(e);
        }
        self.state.played_up_to = end;
        let mut out = StepOutcome {
            played: entries.len(),
            appended: 0,
        };
        if let Some(s) = self.snapshots.as_mut() {
            s.maybe_put(self.ctx.id(), end, &self.state, self.ctx.clock.now_ms())?;
        }
        if let Some(position) = self.fenced {
            return Err(ComponentError::Fenced { position });
        }
        if self.election.is_none() {
            let (pos, _) = elect_with(&self.ctx.client, self.ctx.id(), self.state.elections.next_epoch())?;
            self.election = Some(pos);
            out.appended = 1;
            return Ok(out);
        }
        let Some(epoch) = self.epoch else {
            return Ok(out);
        };
        out.appended += self.act(epoch)?;
        Ok(out)
    }

    fn played_up_to(&self) -> Position {
        self.state.played_up_to
    }

    fn state_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.state).expect("driver state serializes")
    }
}
