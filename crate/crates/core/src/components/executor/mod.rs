mod sandbox;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::PathBuf;
use std::time::Duration;

use agentbus::{Entry, Payload, PayloadType as T, PolicyKind, Position, ResultStatus, TypeSet};
use serde::{Deserialize, Serialize};

use super::fencing::{election_of, EpochTracker};
use super::{fetch, Component, ComponentContext, ComponentError, StepOutcome};
use crate::roles::Role;

pub use sandbox::{ActionOutcome, Sandbox, SandboxError, SideEffectHook};

/// Observes each execution as it starts: (intent position, bus tail).
pub type ExecutionObserver = Box<dyn FnMut(Position, Position) + Send>;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutorState {
    pub sandbox_root: PathBuf,
    /// Intents this instance treats as already executed.
    pub executed: BTreeSet<Position>,
    /// Position of this instance's recovery result. Commits logged before it
    /// are never run by this instance.
    pub fence: Option<Position>,
    /// First decision seen per intent: true for Commit.
    pub first_decision: BTreeMap<Position, bool>,
    pub elections: EpochTracker,
    pub played_up_to: Position,
}

impl ExecutorState {
    /// Folds one entry; returns an intent that became runnable.
    fn apply(&mut self, e: &Entry) -> Option<Position> {
        match &e.payload {
            Payload::Policy(p) if p.kind == PolicyKind::DriverElection => {
                if let Some(el) = election_of(e) {
                    self.elections.observe(e.position, el.epoch);
                }
                None
            }
            Payload::Abort(a) => {
                self.first_decision.entry(a.intent_position).or_insert(false);
                None
            }
            Payload::Commit(c) => {
                let p = c.intent_position;
                let first = *self.first_decision.entry(p).or_insert(true);
                let fenced = self.fence.is_none_or(|f| e.position < f);
                if !first || fenced || self.executed.contains(&p) {
                    None
                } else {
                    Some(p)
                }
            }
            _ => None,
        }
    }
}

pub struct Executor {
    ctx: ComponentContext,
    sandbox: Sandbox,
    state: ExecutorState,
    queue: VecDeque<Position>,
    observer: Option<ExecutionObserver>,
}

impl Executor {
    pub fn new(ctx: ComponentContext, sandbox: Sandbox) -> Self {
        let state = ExecutorState {
            sandbox_root: sandbox.root().to_path_buf(),
            ..ExecutorState::default()
        };
        Executor {
            ctx,
            sandbox,
            state,
            queue: VecDeque::new(),
            observer: None,
        }
    }

    pub fn with_observer(mut self, observer: ExecutionObserver) -> Self {
        self.observer = Some(observer);
        self
    }

    pub fn state(&self) -> &ExecutorState {
        &self.state
    }

    fn interest() -> TypeSet {
        TypeSet::of(&[T::Commit, T::Abort, T::Policy])
    }

    /// Appends the recovery result and treats every earlier commit as done.
    fn boot(&mut self) -> Result<(), ComponentError> {
        let fence = self.ctx.client.append(Payload::result(
            None,
            ResultStatus::Recovery,
            format!(
                "executor {} started; actions committed before this entry will not be run",
                self.ctx.id()
            ),
        ))?;
        self.state.fence = Some(fence);
        for e in self.ctx.client.read(0, fence)? {
            if let Payload::Commit(c) = &e.payload {
                self.state.executed.insert(c.intent_position);
            }
            self.state.apply(&e);
        }
        self.state.played_up_to = fence + 1;
        tracing::info!(executor = self.ctx.id(), fence, fenced = self.state.executed.len(), "executor booted");
        Ok(())
    }

    fn execute(&mut self, pos: Position) -> Result<bool, ComponentError> {
        let client = &self.ctx.client;
        let intent = client
            .read(pos, pos + 1)?
            .into_iter()
            .find_map(|e| match e.payload {
                Payload::Intent(i) => Some(i),
                _ => None,
            });
        let Some(intent) = intent else {
            tracing::warn!(position = pos, "commit does not reference an intent");
            return Ok(false);
        };
        if !self.state.elections.is_valid(pos, intent.driver_epoch) {
            tracing::warn!(position = pos, "skipping commit for a fenced intent");
            return Ok(false);
        }
        self.state.executed.insert(pos);
        if let Some(obs) = self.observer.as_mut() {
            obs(pos, client.tail());
        }
        let outcome = match self.sandbox.run(&intent.action) {
            Ok(o) => o,
            Err(SandboxError::Killed) => return Err(ComponentError::Killed),
            Err(e @ SandboxError::Violation(_)) => ActionOutcome {
                status: ResultStatus::Error,
                output: e.to_string(),
            },
        };
        client.append(Payload::result(Some(pos), outcome.status, outcome.output))?;
        Ok(true)
    }
}

impl Component for Executor {
    fn id(&self) -> &str {
        self.ctx.id()
    }

    fn role(&self) -> Role {
        Role::Executor
    }

    fn step(&mut self, wait: Duration) -> Result<StepOutcome, ComponentError> {
        if self.state.fence.is_none() {
            self.boot()?;
            return Ok(StepOutcome {
                played: 0,
                appended: 1,
            });
        }
        let (entries, end) = fetch(
            &self.ctx.client,
            self.state.played_up_to,
            Self::interest(),
            Role::Executor.permissions().pollable,
            wait,
        )?;
        for e in &entries {
            if let Some(p) = self.state.apply(e) {
                if !self.queue.contains(&p) {
                    self.queue.push_back(p);
                }
            }
        }
        self.state.played_up_to = end;
        let mut appended = 0;
        while let Some(p) = self.queue.pop_front() {
            if self.state.executed.contains(&p) {
                continue;
            }
            if self.execute(p)? {
                appended += 1;
            }
        }
        Ok(StepOutcome {
            played: entries.len(),
            appended,
        })
    }

    fn played_up_to(&self) -> Position {
        self.state.played_up_to
    }

    fn state_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.state).expect("executor state serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::components::testutil::Rig;
    use agentbus::{ActionSpec, BusClient, PayloadType};

    fn executor(rig: &Rig, root: &std::path::Path) -> Executor {
        Executor::new(rig.ctx(Role::Executor, "exec"), Sandbox::new(root).unwrap())
    }

    fn intent(rig: &Rig, action: ActionSpec) -> Position {
        let d = BusClient::new(rig.bus.clone(), Role::Driver.identity("d"));
        d.append(Payload::intent(action, 0, 1)).unwrap()
    }

    fn decider(rig: &Rig) -> BusClient {
        BusClient::new(rig.bus.clone(), Role::Decider.identity("dec"))
    }

    fn results(rig: &Rig) -> Vec<agentbus::ResultBody> {
        rig.entries()
            .into_iter()
            .filter_map(|e| match e.payload {
                Payload::Result(r) if r.status != ResultStatus::Recovery => Some(r),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn boot_on_empty_bus_appends_recovery() {
        let rig = Rig::new();
        let dir = tempfile::tempdir().unwrap();
        let mut x = executor(&rig, dir.path());
        x.step(Duration::ZERO).unwrap();
        let e = rig.entries();
        assert_eq!(e.len(), 1);
        assert!(matches!(&e[0].payload, Payload::Result(r) if r.status == ResultStatus::Recovery && r.intent_position.is_none()));
        assert!(x.state().executed.is_empty());
        assert_eq!(x.state().fence, Some(0));
    }

    #[test]
    fn commit_before_boot_is_never_run() {
        let rig = Rig::new();
        let dir = tempfile::tempdir().unwrap();
        let p = intent(&rig, ActionSpec::shell("touch ran"));
        decider(&rig).append(Payload::commit(p)).unwrap();
        let mut x = executor(&rig, dir.path());
        x.step(Duration::ZERO).unwrap();
        x.step(Duration::ZERO).unwrap();
        assert_eq!(x.state().executed, BTreeSet::from([p]));
        assert!(!dir.path().join("ran").exists());
        assert!(results(&rig).is_empty());
    }

    #[test]
    fn intent_logged_before_boot_but_committed_after_runs() {
        let rig = Rig::new();
        let dir = tempfile::tempdir().unwrap();
        let p = intent(&rig, ActionSpec::shell("touch ran"));
        let mut x = executor(&rig, dir.path());
        x.step(Duration::ZERO).unwrap();
        decider(&rig).append(Payload::commit(p)).unwrap();
        x.step(Duration::ZERO).unwrap();
        assert!(dir.path().join("ran").exists());
        assert_eq!(results(&rig).len(), 1);
    }

    #[test]
    fn executes_committed_action_once() {
        let rig = Rig::new();
        let dir = tempfile::tempdir().unwrap();
        let mut x = executor(&rig, dir.path());
        x.step(Duration::ZERO).unwrap();
        let p = intent(&rig, ActionSpec::shell("echo hi; echo x >> count"));
        decider(&rig).append(Payload::commit(p)).unwrap();
        decider(&rig).append(Payload::commit(p)).unwrap();
        x.step(Duration::ZERO).unwrap();
        x.step(Duration::ZERO).unwrap();
        let rs = results(&rig);
        assert_eq!(rs.len(), 1);
        assert_eq!(rs[0].status, ResultStatus::Ok);
        assert!(rs[0].output.contains("hi"));
        assert_eq!(std::fs::read_to_string(dir.path().join("count")).unwrap(), "x\n");
    }

    #[test]
    fn first_decision_wins() {
        let rig = Rig::new();
        let dir = tempfile::tempdir().unwrap();
        let mut x = executor(&rig, dir.path());
        x.step(Duration::ZERO).unwrap();
        let p = intent(&rig, ActionSpec::shell("touch ran"));
        decider(&rig).append(Payload::abort(p, "timeout")).unwrap();
        decider(&rig).append(Payload::commit(p)).unwrap();
        x.step(Duration::ZERO).unwrap();
        assert!(!dir.path().join("ran").exists());
        assert!(results(&rig).is_empty());
    }

    #[test]
    fn violation_is_an_error_result() {
        let rig = Rig::new();
        let dir = tempfile::tempdir().unwrap();
        let jail = dir.path().join("jail");
        let mut x = executor(&rig, &jail);
        x.step(Duration::ZERO).unwrap();
        let p = intent(&rig, ActionSpec::shell("touch escaped").with_workdir("../.."));
        decider(&rig).append(Payload::commit(p)).unwrap();
        x.step(Duration::ZERO).unwrap();
        let rs = results(&rig);
        assert_eq!(rs[0].status, ResultStatus::Error);
        assert!(rs[0].output.contains("sandbox violation"));
        assert!(!dir.path().join("escaped").exists());
    }

    #[test]
    fn executor_identity_cannot_reach_the_safe_tier() {
        let rig = Rig::new();
        let client = BusClient::new(rig.bus.clone(), Role::Executor.identity("exec"));
        for payload in [
            Payload::commit(0),
            Payload::abort(0, "x"),
            Payload::policy(agentbus::PolicyKind::Decider, "exec", serde_json::json!({})),
            Payload::mail("exec", "x"),
        ] {
            assert!(client.append(payload).unwrap_err().is_permission_denied());
        }
        assert!(rig.entries().iter().all(|e| e.payload_type() == PayloadType::Result));
    }
}
