mod llm;
mod rule;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use agentbus::{
    ActionSpec, BusClient, BusError, Clock, Entry, Payload, PayloadType as T, PolicyKind, Position,
    TypeSet, Verdict, VoteBody,
};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::fencing::{election_of, EpochTracker};
use super::{fetch, Component, ComponentContext, ComponentError, Snapshotter, StepOutcome};
use crate::inference::InferenceError;
use crate::policy::{parse_policy_value, PolicyDocument};
use crate::roles::Role;

pub use llm::{LlmVoter, LlmVoterConfig};
pub use rule::{Pattern, Rule, RuleEngine, RuleScope, RuleSet};

#[derive(Debug, Error)]
pub enum VoterError {
    #[error("voter configuration: {0}")]
    Config(String),
    #[error("voter policy: {0}")]
    Policy(String),
    #[error("{0}")]
    Behavior(String),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Bus(#[from] BusError),
}

/// What a behavior decided about one intent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Ballot {
    Cast { verdict: Verdict, rationale: String },
    /// Ask again at `until_ms` (or when new entries arrive).
    Defer { until_ms: u64 },
}

pub struct VoteContext<'a> {
    pub intent_position: Position,
    pub action: &'a ActionSpec,
    pub intent_ts: u64,
    pub now_ms: u64,
    /// The voter's own handle, for reading history it is allowed to see.
    pub client: &'a BusClient,
}

/// The pluggable part of a voter.
pub trait VoteBehavior: Send {
    fn vote(&mut self, ctx: &VoteContext<'_>) -> Result<Ballot, VoterError>;
    fn apply_policy(&mut self, body: &Value) -> Result<(), VoterError>;
}

struct Fixed(Verdict);

impl VoteBehavior for Fixed {
    fn vote(&mut self, _: &VoteContext<'_>) -> Result<Ballot, VoterError> {
        Ok(Ballot::Cast {
            verdict: self.0,
            rationale: "fixed verdict".into(),
        })
    }

    fn apply_policy(&mut self, body: &Value) -> Result<(), VoterError> {
        match body.get("verdict").cloned().map(serde_json::from_value) {
            Some(Ok(v)) => {
                self.0 = v;
                Ok(())
            }
            _ => Err(VoterError::Policy("expected {\"verdict\": ...}".into())),
        }
    }
}

/// Behavior configuration as it appears in voter config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "behavior", rename_all = "snake_case")]
pub enum BehaviorConfig {
    Rule(RuleSet),
    /// A rule set kept in its own file.
    RuleFile { rules_file: std::path::PathBuf },
    Llm(LlmVoterConfig),
    Fixed { verdict: Verdict },
}

impl BehaviorConfig {
    pub fn build(&self, clock: Arc<dyn Clock>) -> Result<Box<dyn VoteBehavior>, VoterError> {
        Ok(match self {
            BehaviorConfig::Rule(set) => Box::new(RuleEngine::new(set.clone())?),
            BehaviorConfig::RuleFile { rules_file } => {
                let text = std::fs::read_to_string(rules_file)
                    .map_err(|e| VoterError::Config(format!("{}: {e}", rules_file.display())))?;
                let set: RuleSet = serde_json::from_str(&text)
                    .map_err(|e| VoterError::Config(format!("{}: {e}", rules_file.display())))?;
                Box::new(RuleEngine::new(set)?)
            }
            BehaviorConfig::Llm(cfg) => Box::new(LlmVoter::new(cfg, clock)?),
            BehaviorConfig::Fixed { verdict } => Box::new(Fixed(*verdict)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingVote {
    pub action: ActionSpec,
    pub realtime_ts: u64,
    /// Voter policies in force at the intent's position.
    pub policies_in_force: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoterState {
    pub voter_type: String,
    pub voter_id: String,
    /// Bodies of the voter policies addressed to this type, in log order.
    pub policies: Vec<Value>,
    /// Valid intents that are undecided and not yet voted on by this voter.
    pub pending: BTreeMap<Position, PendingVote>,
    pub elections: EpochTracker,
    pub played_up_to: Position,
}

impl VoterState {
    pub fn new(voter_type: &str, voter_id: &str) -> Self {
        VoterState {
            voter_type: voter_type.into(),
            voter_id: voter_id.into(),
            ..Self::default()
        }
    }

    pub fn replay<'a>(voter_type: &str, voter_id: &str, entries: impl IntoIterator<Item = &'a Entry>) -> Self {
        let mut s = Self::new(voter_type, voter_id);
        for e in entries {
            s.apply(e);
            s.played_up_to = e.position + 1;
        }
        s
    }

    pub fn apply(&mut self, e: &Entry) {
        match &e.payload {
            Payload::Intent(i) if self.elections.is_valid(e.position, i.driver_epoch) => {
                self.pending.insert(
                    e.position,
                    PendingVote {
                        action: i.action.clone(),
                        realtime_ts: e.realtime_ts,
                        policies_in_force: self.policies.len(),
                    },
                );
            }
            Payload::Vote(v) if v.voter_id == self.voter_id => {
                self.pending.remove(&v.intent_position);
            }
            Payload::Commit(c) => {
                self.pending.remove(&c.intent_position);
            }
            Payload::Abort(a) => {
                self.pending.remove(&a.intent_position);
            }
            Payload::Policy(p) => match p.kind {
                PolicyKind::DriverElection => {
                    if let Some(el) = election_of(e) {
                        self.elections.observe(e.position, el.epoch);
                    }
                }
                PolicyKind::Voter => match parse_policy_value(&p.body) {
                    Ok(PolicyDocument::Voter(vp)) if vp.target_voter_type == self.voter_type => {
                        self.policies.push(vp.body);
                    }
                    Ok(_) => {}
                    Err(err) => tracing::warn!(position = e.position, error = %err, "ignoring voter policy"),
                },
                PolicyKind::Decider => {}
            },
            _ => {}
        }
    }
}

pub struct Voter {
    ctx: ComponentContext,
    config: BehaviorConfig,
    live: Box<dyn VoteBehavior>,
    live_policies: usize,
    state: VoterState,
    deferred: BTreeMap<Position, u64>,
    snapshots: Option<Snapshotter>,
}

impl Voter {
    /// `voter_type` is the key decider policies match on; the voter id is the
    /// client id.
    pub fn new(ctx: ComponentContext, voter_type: &str, config: BehaviorConfig) -> Result<Self, VoterError> {
        let live = config.build(ctx.clock.clone())?;
        let mut snapshots = ctx.snapshotter();
        let state = snapshots
            .as_mut()
            .and_then(|s| s.load::<VoterState>(ctx.id(), ctx.client.tail()))
            .filter(|s| s.voter_type == voter_type && s.voter_id == ctx.id())
            .unwrap_or_else(|| VoterState::new(voter_type, ctx.id()));
        Ok(Voter {
            ctx,
            config,
            live,
            live_policies: 0,
            state,
            deferred: BTreeMap::new(),
            snapshots,
        })
    }

    pub fn state(&self) -> &VoterState {
        &self.state
    }

    pub fn voter_type(&self) -> &str {
        &self.state.voter_type
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

    fn apply_policies(behavior: &mut dyn VoteBehavior, policies: &[Value]) {
        for p in policies {
            if let Err(e) = behavior.apply_policy(p) {
                tracing::warn!(error = %e, "voter policy rejected by behavior");
            }
        }
    }

    fn ballot(&mut self, pos: Position, pending: &PendingVote, now: u64) -> Ballot {
        let ctx = VoteContext {
            intent_position: pos,
            action: &pending.action,
            intent_ts: pending.realtime_ts,
            now_ms: now,
            client: &self.ctx.client,
        };
        let result = if pending.policies_in_force == self.live_policies {
            self.live.vote(&ctx)
        } else {
            // The intent predates later policies: judge it as of its position.
            self.config.build(self.ctx.clock.clone()).and_then(|mut b| {
                Self::apply_policies(b.as_mut(), &self.state.policies[..pending.policies_in_force]);
                b.vote(&ctx)
            })
        };
        result.unwrap_or_else(|e| Ballot::Cast {
            verdict: Verdict::Reject,
            rationale: format!("voter failure: {e}"),
        })
    }

    fn act(&mut self) -> Result<usize, ComponentError> {
        if self.live_policies < self.state.policies.len() {
            Self::apply_policies(self.live.as_mut(), &self.state.policies[self.live_policies..]);
            self.live_policies = self.state.policies.len();
        }
        let now = self.ctx.clock.now_ms();
        self.deferred.retain(|p, _| self.state.pending.contains_key(p));
        let pending: Vec<(Position, PendingVote)> = self
            .state
            .pending
            .iter()
            .filter(|(p, _)| self.deferred.get(p).is_none_or(|until| *until <= now))
            .map(|(p, v)| (*p, v.clone()))
            .collect();
        let mut appended = 0;
        for (pos, pv) in pending {
            match self.ballot(pos, &pv, now) {
                Ballot::Defer { until_ms } => {
                    self.deferred.insert(pos, until_ms.max(now + 1));
                }
                Ballot::Cast { verdict, rationale } => {
                    self.deferred.remove(&pos);
                    self.ctx.client.append(Payload::Vote(VoteBody {
                        intent_position: pos,
                        voter_type: self.state.voter_type.clone(),
                        voter_id: self.state.voter_id.clone(),
                        verdict,
                        rationale,
                    }))?;
                    appended += 1;
                }
            }
        }
        Ok(appended)
    }
}

impl Component for Voter {
    fn id(&self) -> &str {
        self.ctx.id()
    }

    fn role(&self) -> Role {
        Role::Voter
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
            Role::Voter.permissions().pollable,
            wait,
        )?;
        for e in &entries {
            self.state.apply(e);
            // a new vote may be what a deferred ballot was waiting for
            if let Payload::Vote(v) = &e.payload {
                self.deferred.remove(&v.intent_position);
            }
        }
        self.state.played_up_to = end;
        if let Some(s) = self.snapshots.as_mut() {
            s.maybe_put(self.ctx.id(), end, &self.state, self.ctx.clock.now_ms())?;
        }
        let appended = self.act()?;
        Ok(StepOutcome {
            played: entries.len(),
            appended,
        })
    }

    fn next_deadline(&self) -> Option<u64> {
        self.deferred.values().min().copied()
    }

    fn played_up_to(&self) -> Position {
        self.state.played_up_to
    }

    fn state_json(&self) -> Value {
        serde_json::to_value(&self.state).expect("voter state serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::components::testutil::Rig;
    use crate::inference::{AdapterConfig, ScriptRules};
    use crate::policy::VoterPolicy;
    use serde_json::json;

    fn intent(rig: &Rig, body: &str) -> Position {
        let d = BusClient::new(rig.bus.clone(), Role::Driver.identity("d"));
        d.append(Payload::intent(ActionSpec::shell(body), 0, 1)).unwrap()
    }

    fn votes(rig: &Rig) -> Vec<VoteBody> {
        rig.entries()
            .into_iter()
            .filter_map(|e| match e.payload {
                Payload::Vote(v) => Some(v),
                _ => None,
            })
            .collect()
    }

    fn rule_voter(rig: &Rig) -> Voter {
        let rules = RuleSet {
            rules: vec![Rule::regex(r"rm\s+-rf", Verdict::Reject), Rule::regex("^rm ", Verdict::Reject)],
            default: Verdict::Approve,
        };
        Voter::new(rig.ctx(Role::Voter, "rule-1"), "rule", BehaviorConfig::Rule(rules)).unwrap()
    }

    #[test]
    fn one_vote_per_intent() {
        let rig = Rig::new();
        let mut v = rule_voter(&rig);
        let bad = intent(&rig, "rm -rf /data");
        let good = intent(&rig, "ls");
        v.step(Duration::ZERO).unwrap();
        v.step(Duration::ZERO).unwrap();
        let vs = votes(&rig);
        assert_eq!(vs.len(), 2);
        assert_eq!((vs[0].intent_position, vs[0].verdict), (bad, Verdict::Reject));
        assert_eq!((vs[1].intent_position, vs[1].verdict), (good, Verdict::Approve));
        assert_eq!(vs[0].voter_type, "rule");
        assert!(v.state().pending.is_empty());
    }

    #[test]
    fn policy_applies_to_later_intents_only() {
        let rig = Rig::new();
        let mut v = rule_voter(&rig);
        let early = intent(&rig, "rm a.tmp");
        let doc = PolicyDocument::Voter(VoterPolicy {
            target_voter_type: "rule".into(),
            body: json!({"prepend": [{"pattern": {"glob": "rm *.tmp"}, "verdict": "approve"}]}),
        });
        rig.admin.append(doc.to_payload("admin")).unwrap();
        let late = intent(&rig, "rm a.tmp");
        v.step(Duration::ZERO).unwrap();
        let vs = votes(&rig);
        assert_eq!((vs[0].intent_position, vs[0].verdict), (early, Verdict::Reject));
        assert_eq!((vs[1].intent_position, vs[1].verdict), (late, Verdict::Approve));
    }

    #[test]
    fn late_joiner_skips_decided_intents() {
        let rig = Rig::new();
        let decided = intent(&rig, "ls");
        let dec = BusClient::new(rig.bus.clone(), Role::Decider.identity("dec"));
        dec.append(Payload::commit(decided)).unwrap();
        let open = intent(&rig, "pwd");
        let mut v = rule_voter(&rig);
        v.step(Duration::ZERO).unwrap();
        let vs = votes(&rig);
        assert_eq!(vs.len(), 1);
        assert_eq!(vs[0].intent_position, open);
    }

    #[test]
    fn fenced_intents_get_no_vote() {
        let rig = Rig::new();
        let d2 = BusClient::new(rig.bus.clone(), Role::Driver.identity("d2"));
        crate::components::elect_driver(&d2, "d2").unwrap();
        intent(&rig, "ls"); // stamped epoch 0 after epoch 1 was elected
        let mut v = rule_voter(&rig);
        v.step(Duration::ZERO).unwrap();
        assert!(votes(&rig).is_empty());
    }

    #[test]
    fn broken_behavior_fails_closed() {
        let rig = Rig::new();
        let cfg = BehaviorConfig::Llm(LlmVoterConfig {
            adapter: AdapterConfig::scripted(ScriptRules::new("no opinion")),
            prompt: String::new(),
            consult: vec![],
            consult_wait_ms: 0,
        });
        let mut v = Voter::new(rig.ctx(Role::Voter, "llm-1"), "llm", cfg).unwrap();
        intent(&rig, "ls");
        v.step(Duration::ZERO).unwrap();
        let vs = votes(&rig);
        assert_eq!(vs[0].verdict, Verdict::Reject);
        assert!(vs[0].rationale.starts_with("voter failure"));
    }

    #[test]
    fn llm_override_sees_rule_votes() {
        let rig = Rig::new();
        let mut rule = rule_voter(&rig);
        let cfg = BehaviorConfig::Llm(LlmVoterConfig {
            adapter: AdapterConfig::scripted(
                ScriptRules::new("REJECT: unsure").regex(r"rule/rule-1: Reject[\s\S]*", "APPROVE: benign cleanup"),
            ),
            prompt: "You override the static voter when the action is benign.".into(),
            consult: vec!["rule".into()],
            consult_wait_ms: 1_000,
        });
        let mut llm = Voter::new(rig.ctx(Role::Voter, "llm-1"), "llm", cfg).unwrap();
        let p = intent(&rig, "rm old.log");
        llm.step(Duration::ZERO).unwrap();
        assert!(votes(&rig).is_empty(), "waits for the rule vote");
        assert_eq!(llm.next_deadline(), Some(rig.clock.now_ms() + 1_000));
        rule.step(Duration::ZERO).unwrap();
        llm.step(Duration::ZERO).unwrap();
        let vs = votes(&rig);
        assert_eq!(vs.len(), 2);
        assert_eq!((vs[1].intent_position, vs[1].voter_type.as_str(), vs[1].verdict), (p, "llm", Verdict::Approve));
    }

    #[test]
    fn consult_wait_expires() {
        let rig = Rig::new();
        let cfg = BehaviorConfig::Llm(LlmVoterConfig {
            adapter: AdapterConfig::scripted(ScriptRules::new("APPROVE")),
            prompt: String::new(),
            consult: vec!["rule".into()],
            consult_wait_ms: 500,
        });
        let mut llm = Voter::new(rig.ctx(Role::Voter, "llm-1"), "llm", cfg).unwrap();
        intent(&rig, "ls");
        llm.step(Duration::ZERO).unwrap();
        assert!(votes(&rig).is_empty());
        rig.clock.advance(Duration::from_millis(500));
        llm.step(Duration::ZERO).unwrap();
        assert_eq!(votes(&rig).len(), 1);
    }

    #[test]
    fn replay_matches_live_state() {
        let rig = Rig::new();
        let mut v = rule_voter(&rig);
        intent(&rig, "ls");
        v.step(Duration::ZERO).unwrap();
        intent(&rig, "pwd");
        v.catch_up().unwrap();
        assert_eq!(v.state(), &VoterState::replay("rule", "rule-1", rig.entries().iter()));
        assert_eq!(v.state().pending.len(), 1);
    }
}
