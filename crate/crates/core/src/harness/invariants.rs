//! The protocol invariants, checked over a log as it grows.
//!
//! Each entry is checked against the prefix before it, so a violation is
//! reported at the first prefix that exhibits it.

use std::collections::{BTreeMap, BTreeSet};

use agentbus::{Entry, Payload, PayloadType, PolicyKind, Position, ResultStatus, VoteBody};
use serde::Serialize;

use super::faulty::AppendRecord;
use crate::components::{election_of, EpochTracker};
use crate::policy::{parse_policy_value, DeciderPolicy, Decision, PolicyDocument};
use crate::roles::Role;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Invariant {
    CommitBeforeExecute,
    SingleInFlight,
    Fencing,
    Acl,
    EnforcedSafety,
    DuplicateExecution,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub invariant: Invariant,
    pub positions: Vec<Position>,
    pub detail: String,
}

/// An execution as the executor reported it when it started.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Execution {
    pub intent: Position,
    /// Bus tail when the action started.
    pub tail: Position,
    pub executor: String,
}

#[derive(Debug, Clone)]
struct IntentInfo {
    epoch: u64,
    valid: bool,
    policy: DeciderPolicy,
    votes: Vec<VoteBody>,
    /// (position, committed)
    first_decision: Option<(Position, bool)>,
    results: Vec<Position>,
}

pub struct InvariantChecker {
    elections: EpochTracker,
    policy: DeciderPolicy,
    intents: BTreeMap<Position, IntentInfo>,
    in_flight: BTreeMap<u64, BTreeSet<Position>>,
    violations: Vec<Violation>,
}

impl InvariantChecker {
    pub fn new(initial_policy: DeciderPolicy) -> Self {
        InvariantChecker {
            elections: EpochTracker::new(),
            policy: initial_policy,
            intents: BTreeMap::new(),
            in_flight: BTreeMap::new(),
            violations: Vec::new(),
        }
    }

    fn violate(&mut self, invariant: Invariant, positions: Vec<Position>, detail: impl Into<String>) {
        self.violations.push(Violation {
            invariant,
            positions,
            detail: detail.into(),
        });
    }

    /// Checks `e` against everything observed before it.
    pub fn observe(&mut self, e: &Entry) {
        let pos = e.position;
        match &e.payload {
            Payload::Policy(p) => {
                if p.kind == PolicyKind::DriverElection {
                    if let Some(el) = election_of(e) {
                        self.elections.observe(pos, el.epoch);
                    }
                } else if p.kind == PolicyKind::Decider {
                    if let Ok(PolicyDocument::Decider(d)) = parse_policy_value(&p.body) {
                        self.policy = d;
                    }
                }
            }
            Payload::Intent(i) => {
                let valid = self.elections.is_valid(pos, i.driver_epoch);
                if valid {
                    let flying = self.in_flight.entry(i.driver_epoch).or_default();
                    if !flying.is_empty() {
                        let mut ps: Vec<Position> = flying.iter().copied().collect();
                        ps.push(pos);
                        let detail = format!("epoch {} has intents {ps:?} in flight at once", i.driver_epoch);
                        flying.insert(pos);
                        self.violate(Invariant::SingleInFlight, ps, detail);
                    } else {
                        flying.insert(pos);
                    }
                }
                self.intents.insert(
                    pos,
                    IntentInfo {
                        epoch: i.driver_epoch,
                        valid,
                        policy: self.policy.clone(),
                        votes: Vec::new(),
                        first_decision: None,
                        results: Vec::new(),
                    },
                );
            }
            Payload::Vote(v) => {
                let Some(info) = self.intents.get_mut(&v.intent_position) else {
                    return;
                };
                if !info.valid {
                    self.violate(Invariant::Fencing, vec![v.intent_position, pos], "vote on a fenced intent");
                    return;
                }
                if info.first_decision.is_none() {
                    info.votes.push(v.clone());
                }
            }
            Payload::Commit(_) | Payload::Abort(_) => self.observe_decision(e),
            Payload::Result(r) => match r.intent_position {
                None if r.status == ResultStatus::Recovery => {
                    // the restarted executor will never run anything before it
                    for flying in self.in_flight.values_mut() {
                        flying.retain(|p| *p > pos);
                    }
                }
                None => {}
                Some(p) => self.observe_result(p, pos),
            },
            _ => {}
        }
    }

    fn observe_decision(&mut self, e: &Entry) {
        let pos = e.position;
        let (p, committed, reason) = match &e.payload {
            Payload::Commit(c) => (c.intent_position, true, String::new()),
            Payload::Abort(a) => (a.intent_position, false, a.reason.clone()),
            _ => unreachable!("only decisions"),
        };
        let Some(info) = self.intents.get_mut(&p) else {
            return;
        };
        if !info.valid {
            self.violate(Invariant::Fencing, vec![p, pos], "decision on a fenced intent");
            return;
        }
        if info.first_decision.is_some() {
            return;
        }
        info.first_decision = Some((pos, committed));
        let expected = info.policy.evaluate(&info.votes);
        let epoch = info.epoch;
        let ok = match (&expected, committed) {
            (Decision::Commit, true) => true,
            (Decision::Abort(_), false) => true,
            (_, false) => reason.starts_with("timeout"),
            _ => false,
        };
        if !ok {
            let detail = format!(
                "{} under `{}` with {} votes, policy says {expected:?}",
                if committed { "commit" } else { "abort" },
                info.policy,
                info.votes.len()
            );
            self.violate(Invariant::EnforcedSafety, vec![p, pos], detail);
        }
        if !committed {
            if let Some(flying) = self.in_flight.get_mut(&epoch) {
                flying.remove(&p);
            }
        }
    }

    fn observe_result(&mut self, p: Position, pos: Position) {
        let Some(info) = self.intents.get_mut(&p) else {
            self.violate(Invariant::CommitBeforeExecute, vec![pos], format!("result for unknown intent @{p}"));
            return;
        };
        info.results.push(pos);
        let epoch = info.epoch;
        let (valid, first, n) = (info.valid, info.first_decision, info.results.len());
        if !valid {
            self.violate(Invariant::Fencing, vec![p, pos], "result for a fenced intent");
        }
        if !matches!(first, Some((_, true))) {
            self.violate(Invariant::CommitBeforeExecute, vec![p, pos], "result without a prior commit");
        }
        if n > 1 {
            self.violate(Invariant::DuplicateExecution, vec![p, pos], format!("{n} results for one intent"));
        }
        if let Some(flying) = self.in_flight.get_mut(&epoch) {
            flying.remove(&p);
        }
    }

    /// Every append must be allowed for its author, and executor identities
    /// may never reach the safety tier.
    pub fn check_appends(&mut self, entries: &[Entry], records: &[AppendRecord]) {
        let by_pos: BTreeMap<Position, &Entry> = entries.iter().map(|e| (e.position, e)).collect();
        let executor = Role::Executor.permissions();
        for r in records {
            let ty = by_pos.get(&r.position).map(|e| e.payload_type());
            if ty != Some(r.payload_type) {
                self.violate(Invariant::Acl, vec![r.position], "append record does not match the log");
            }
            if !r.client.permissions.can_append(r.payload_type) {
                self.violate(
                    Invariant::Acl,
                    vec![r.position],
                    format!("{} appended {} without permission", r.client.client_id, r.payload_type),
                );
            }
            let safety_tier = matches!(
                r.payload_type,
                PayloadType::Vote | PayloadType::Commit | PayloadType::Abort | PayloadType::Policy
            );
            if r.client.permissions == executor && safety_tier {
                self.violate(
                    Invariant::Acl,
                    vec![r.position],
                    format!("executor {} appended {}", r.client.client_id, r.payload_type),
                );
            }
        }
    }

    /// Executions must follow a commit that was first, and never repeat.
    pub fn check_executions(&mut self, executions: &[Execution]) {
        let mut seen = BTreeSet::new();
        for x in executions {
            if !seen.insert(x.intent) {
                self.violate(
                    Invariant::DuplicateExecution,
                    vec![x.intent],
                    format!("intent executed again by {}", x.executor),
                );
            }
            let first = self.intents.get(&x.intent).and_then(|i| i.first_decision);
            match first {
                Some((d, true)) if d < x.tail => {}
                _ => self.violate(
                    Invariant::CommitBeforeExecute,
                    vec![x.intent],
                    format!("{} started before a winning commit was logged", x.executor),
                ),
            }
        }
    }

    pub fn violations(&self) -> &[Violation] {
        &self.violations
    }

    pub fn into_violations(self) -> Vec<Violation> {
        self.violations
    }
}

/// Runs every check over a finished run.
pub fn check_run(
    initial_policy: &DeciderPolicy,
    entries: &[Entry],
    records: &[AppendRecord],
    executions: &[Execution],
) -> Vec<Violation> {
    let mut c = InvariantChecker::new(initial_policy.clone());
    for e in entries {
        c.observe(e);
    }
    c.check_appends(entries, records);
    c.check_executions(executions);
    c.into_violations()
}

#[cfg(test)]
mod tests {
    use super::*;
    use agentbus::{ActionSpec, Verdict};

    fn entry(position: Position, payload: Payload) -> Entry {
        Entry {
            position,
            realtime_ts: position,
            payload,
        }
    }

    fn vote(p: Position, ty: &str, verdict: Verdict) -> Payload {
        Payload::Vote(VoteBody {
            intent_position: p,
            voter_type: ty.into(),
            voter_id: format!("{ty}-1"),
            verdict,
            rationale: String::new(),
        })
    }

    fn election(epoch: u64, who: &str) -> Payload {
        crate::policy::PolicyDocument::DriverElection(crate::policy::DriverElection {
            epoch,
            candidate: who.into(),
        })
        .to_payload(who)
    }

    fn intent(epoch: u64) -> Payload {
        Payload::intent(ActionSpec::shell("ls"), epoch, 1)
    }

    fn check(policy: DeciderPolicy, log: Vec<Payload>) -> Vec<Invariant> {
        let entries: Vec<Entry> = log.into_iter().enumerate().map(|(i, p)| entry(i as u64, p)).collect();
        check_run(&policy, &entries, &[], &[]).into_iter().map(|v| v.invariant).collect()
    }

    #[test]
    fn clean_run_has_no_violations() {
        let log = vec![
            election(1, "d"),
            intent(1),
            vote(1, "rule", Verdict::Approve),
            Payload::commit(1),
            Payload::result(Some(1), ResultStatus::Ok, "ok"),
            intent(1),
            Payload::abort(5, "timeout: no quorum"),
            intent(1),
        ];
        assert!(check(DeciderPolicy::FirstVoter, log).is_empty());
    }

    #[test]
    fn result_without_commit() {
        let log = vec![election(1, "d"), intent(1), Payload::result(Some(1), ResultStatus::Ok, "")];
        assert_eq!(check(DeciderPolicy::OnByDefault, log), vec![Invariant::CommitBeforeExecute]);
    }

    #[test]
    fn result_after_losing_commit() {
        let log = vec![
            election(1, "d"),
            intent(1),
            Payload::abort(1, "timeout"),
            Payload::commit(1),
            Payload::result(Some(1), ResultStatus::Ok, ""),
        ];
        assert_eq!(check(DeciderPolicy::OnByDefault, log), vec![Invariant::CommitBeforeExecute]);
    }

    #[test]
    fn two_results_are_a_duplicate() {
        let log = vec![
            election(1, "d"),
            intent(1),
            Payload::commit(1),
            Payload::result(Some(1), ResultStatus::Ok, ""),
            Payload::result(Some(1), ResultStatus::Ok, ""),
        ];
        assert_eq!(check(DeciderPolicy::OnByDefault, log), vec![Invariant::DuplicateExecution]);
    }

    #[test]
    fn second_intent_while_first_in_flight() {
        let log = vec![election(1, "d"), intent(1), intent(1)];
        assert_eq!(check(DeciderPolicy::OnByDefault, log), vec![Invariant::SingleInFlight]);
        // a restarted executor resolves what came before it
        let log = vec![
            election(1, "d"),
            intent(1),
            Payload::commit(1),
            Payload::result(None, ResultStatus::Recovery, "restarted"),
            intent(1),
        ];
        assert!(check(DeciderPolicy::OnByDefault, log).is_empty());
    }

    #[test]
    fn stale_intent_must_be_ignored() {
        // the election at 2 fences epoch 1; the intent at 3 is stale
        let base = vec![election(1, "a"), intent(1), election(2, "b"), intent(1)];
        let mut voted = base.clone();
        voted.push(vote(3, "rule", Verdict::Approve));
        assert_eq!(check(DeciderPolicy::OnByDefault, voted), vec![Invariant::Fencing]);
        let mut committed = base.clone();
        committed.push(Payload::commit(3));
        assert_eq!(check(DeciderPolicy::OnByDefault, committed), vec![Invariant::Fencing]);
        // the intent at 1 predates the election and stays valid
        let mut ok = base;
        ok.push(Payload::commit(1));
        assert!(check(DeciderPolicy::OnByDefault, ok).is_empty());
    }

    #[test]
    fn decision_must_match_policy() {
        let premature = vec![election(1, "d"), intent(1), vote(1, "rule", Verdict::Approve), Payload::commit(1)];
        assert_eq!(
            check(DeciderPolicy::and(["rule", "llm"]), premature),
            vec![Invariant::EnforcedSafety]
        );
        let overridden = vec![election(1, "d"), intent(1), vote(1, "rule", Verdict::Reject), Payload::commit(1)];
        assert_eq!(check(DeciderPolicy::FirstVoter, overridden), vec![Invariant::EnforcedSafety]);
        let unjustified = vec![election(1, "d"), intent(1), Payload::abort(1, "because")];
        assert_eq!(check(DeciderPolicy::OnByDefault, unjustified), vec![Invariant::EnforcedSafety]);
    }

    #[test]
    fn policy_in_force_is_the_one_before_the_intent() {
        let swap = crate::policy::PolicyDocument::Decider(DeciderPolicy::FirstVoter).to_payload("admin");
        let log = vec![election(1, "d"), intent(1), swap, Payload::commit(1)];
        assert!(check(DeciderPolicy::OnByDefault, log).is_empty());
    }

    #[test]
    fn executor_identity_in_the_safety_tier_is_flagged() {
        let entries = vec![entry(0, Payload::commit(0))];
        let records = vec![AppendRecord {
            position: 0,
            client: Role::Executor.identity("x"),
            payload_type: PayloadType::Commit,
        }];
        let mut c = InvariantChecker::new(DeciderPolicy::OnByDefault);
        c.check_appends(&entries, &records);
        let kinds: Vec<Invariant> = c.violations().iter().map(|v| v.invariant).collect();
        assert_eq!(kinds, vec![Invariant::Acl, Invariant::Acl]);
    }

    #[test]
    fn execution_before_commit_is_flagged() {
        let entries: Vec<Entry> = vec![election(1, "d"), intent(1), Payload::commit(1)]
            .into_iter()
            .enumerate()
            .map(|(i, p)| entry(i as u64, p))
            .collect();
        let early = Execution { intent: 1, tail: 2, executor: "x".into() };
        let on_time = Execution { intent: 1, tail: 3, executor: "x".into() };
        assert_eq!(check_run(&DeciderPolicy::OnByDefault, &entries, &[], std::slice::from_ref(&on_time)), vec![]);
        let v = check_run(&DeciderPolicy::OnByDefault, &entries, &[], &[early]);
        assert_eq!(v[0].invariant, Invariant::CommitBeforeExecute);
        let v = check_run(&DeciderPolicy::OnByDefault, &entries, &[], &[on_time.clone(), on_time]);
        assert_eq!(v[0].invariant, Invariant::DuplicateExecution);
    }
}
