//! The scenario runner.
//!
//! Components run in one thread, stepped in a seeded shuffled order with no
//! blocking. When a round makes no progress the clock jumps to the next
//! deadline, or the next idle workload item fires, or the run is quiescent.
//! Everything that varies between runs comes from the seed, so a seed and a
//! scenario reproduce a run byte for byte.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use agentbus::{
    BusClient, ClientIdentity, Clock, DurableBus, Entry, MemoryBus, MemorySnapshotStore,
    Payload, PolicyKind, ResultStatus, SharedBus, SnapshotStore, SyncMode, SystemClock,
    VirtualClock,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::faulty::{AppendRecord, FaultyBus};
use super::invariants::{check_run, Execution, Violation};
use super::metrics::StageMetrics;
use super::scenario::{
    BackendKind, Fault, FaultKind, Oracle, Scenario, Trigger, VoterSpec, WorkloadAction,
    WorkloadItem,
};
use crate::components::{
    election_of, Component, ComponentContext, ComponentError, Decider, Driver, DriverSettings,
    Executor, Sandbox, Voter,
};
use crate::inference::{InferenceAdapter, ScriptedAdapter};
use crate::roles::Role;

/// Virtual time at which every simulated run starts.
pub const SIM_EPOCH_MS: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OracleResult {
    pub oracle: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub seed: u64,
    pub rounds: u64,
    pub quiescent: bool,
    pub entries: u64,
    pub elapsed_ms: u64,
    /// sha256 over the encoded log records.
    pub bus_digest: String,
    /// sha256 over the sandbox tree.
    pub sandbox_digest: String,
    pub metrics: StageMetrics,
    pub violations: Vec<Violation>,
    pub oracles: Vec<OracleResult>,
    /// Components whose live state differs from a fresh replay of the log.
    pub replay_mismatches: Vec<String>,
    pub executions: Vec<Execution>,
    /// Faults fired, deaths and restarts, in order.
    pub events: Vec<String>,
}

impl ScenarioReport {
    pub fn oracles_passed(&self) -> bool {
        self.oracles.iter().all(|o| o.passed)
    }

    /// No violations, every oracle holds, and replay agrees.
    pub fn passed(&self) -> bool {
        self.violations.is_empty() && self.oracles_passed() && self.replay_mismatches.is_empty()
    }

    pub fn summary(&self) -> String {
        let failed: Vec<&str> = self
            .oracles
            .iter()
            .filter(|o| !o.passed)
            .map(|o| o.oracle.as_str())
            .collect();
        format!(
            "{} seed={} entries={} rounds={} violations={} failed_oracles={:?} replay_mismatches={:?}",
            self.scenario,
            self.seed,
            self.entries,
            self.rounds,
            self.violations.len(),
            failed,
            self.replay_mismatches
        )
    }
}

/// A finished run: the report plus the raw log and the sandbox location.
pub struct ScenarioRun {
    pub report: ScenarioReport,
    pub log: Vec<Entry>,
    pub records: Vec<AppendRecord>,
    pub sandbox: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Bus(#[from] agentbus::BusError),
    #[error("cannot start `{slot}`: {reason}")]
    Start { slot: String, reason: String },
}

struct Instance {
    slot: String,
    comp: Box<dyn Component>,
}

enum Pending {
    Work(WorkloadItem),
    Fault(Fault),
}

impl Pending {
    fn trigger(&self) -> &Trigger {
        match self {
            Pending::Work(w) => &w.at,
            Pending::Fault(f) => &f.at,
        }
    }
}

struct Sim<'a> {
    scenario: &'a Scenario,
    virtual_clock: Option<VirtualClock>,
    clock: Arc<dyn Clock>,
    faulty: Arc<FaultyBus>,
    bus: SharedBus,
    admin: BusClient,
    sandbox: PathBuf,
    snapshots: Option<Arc<dyn SnapshotStore>>,
    instances: Vec<Instance>,
    paused: BTreeSet<String>,
    crash_restart: BTreeSet<String>,
    driver_gen: u32,
    rng: ChaCha8Rng,
    pending: VecDeque<Pending>,
    side_effects: Arc<AtomicU64>,
    side_effect_kill: Arc<Mutex<Option<u64>>>,
    executions: Arc<Mutex<Vec<Execution>>>,
    events: Vec<String>,
}

/// Runs `scenario` under `seed`, with the bus file and sandbox in `work_dir`.
pub fn run_scenario(scenario: &Scenario, seed: u64, work_dir: &Path) -> Result<ScenarioRun, SimError> {
    std::fs::create_dir_all(work_dir)?;
    let sandbox = work_dir.join("sandbox");
    if sandbox.exists() {
        std::fs::remove_dir_all(&sandbox)?;
    }
    std::fs::create_dir_all(&sandbox)?;
    let sandbox = sandbox.canonicalize()?;

    let (virtual_clock, clock): (Option<VirtualClock>, Arc<dyn Clock>) = if scenario.realtime {
        (None, Arc::new(SystemClock))
    } else {
        let vc = VirtualClock::new(SIM_EPOCH_MS);
        (Some(vc.clone()), Arc::new(vc))
    };
    let inner: SharedBus = match scenario.backend {
        BackendKind::Memory => Arc::new(MemoryBus::with_clock(clock.clone())),
        BackendKind::Durable => {
            let path = work_dir.join("bus.log");
            if path.exists() {
                std::fs::remove_file(&path)?;
            }
            Arc::new(DurableBus::open_with_clock(&path, SyncMode::Always, clock.clone())?)
        }
    };
    let faulty = Arc::new(FaultyBus::new(inner));
    let bus: SharedBus = faulty.clone();
    let admin = BusClient::new(bus.clone(), ClientIdentity::admin("admin"));
    let snapshots = scenario
        .snapshot_every
        .map(|_| Arc::new(MemorySnapshotStore::new()) as Arc<dyn SnapshotStore>);

    let mut sim = Sim {
        scenario,
        virtual_clock,
        clock,
        faulty,
        bus,
        admin,
        sandbox,
        snapshots,
        instances: Vec::new(),
        paused: BTreeSet::new(),
        crash_restart: BTreeSet::new(),
        driver_gen: 0,
        rng: ChaCha8Rng::seed_from_u64(seed),
        pending: VecDeque::new(),
        side_effects: Arc::new(AtomicU64::new(0)),
        side_effect_kill: Arc::new(Mutex::new(None)),
        executions: Arc::new(Mutex::new(Vec::new())),
        events: Vec::new(),
    };
    sim.start()?;
    let (rounds, quiescent) = sim.run_loop()?;
    sim.finish(seed, rounds, quiescent)
}

impl Sim<'_> {
    fn now(&self) -> u64 {
        self.clock.now_ms()
    }

    fn event(&mut self, text: impl Into<String>) {
        let text = format!("[{}ms @{}] {}", self.now().saturating_sub(SIM_EPOCH_MS), self.admin.tail(), text.into());
        tracing::debug!("{text}");
        self.events.push(text);
    }

    fn start(&mut self) -> Result<(), SimError> {
        let s = self.scenario;
        for w in &s.workload {
            self.pending.push_back(Pending::Work(w.clone()));
        }
        for f in &s.faults {
            if f.at.is_armed() {
                self.arm(f);
            } else {
                self.pending.push_back(Pending::Fault(f.clone()));
            }
        }
        self.spawn("decider")?;
        for v in s.voters.iter().filter(|v| v.autostart) {
            self.spawn(&v.id)?;
        }
        self.spawn("executor")?;
        self.spawn("driver")?;
        Ok(())
    }

    fn arm(&mut self, f: &Fault) {
        if f.kind == FaultKind::Crash {
            self.crash_restart.insert(f.target.clone());
        }
        match &f.at {
            Trigger::ClientAppends { count, .. } => {
                let client = self.client_id_of(&f.target);
                self.faulty.arm_kill(&client, *count);
            }
            Trigger::SideEffects(n) => {
                *self.side_effect_kill.lock().unwrap() = Some(*n);
            }
            _ => unreachable!("only armed triggers"),
        }
    }

    /// The client id a slot's next or current instance uses.
    fn client_id_of(&self, slot: &str) -> String {
        if slot == "driver" {
            format!("driver-{}", self.driver_gen.max(1))
        } else {
            slot.to_string()
        }
    }

    fn ctx(&self, role: Role, id: &str) -> ComponentContext {
        let client = BusClient::new(self.bus.clone(), role.identity(id));
        let ctx = ComponentContext::new(client, self.clock.clone());
        match (&self.snapshots, self.scenario.snapshot_every) {
            (Some(store), Some(every)) => ctx.with_snapshots(store.clone(), every),
            _ => ctx,
        }
    }

    fn voter_spec(&self, id: &str) -> Option<&VoterSpec> {
        self.scenario.voters.iter().find(|v| v.id == id)
    }

    fn adapter(&self) -> Result<Arc<dyn InferenceAdapter>, SimError> {
        let a = ScriptedAdapter::new(self.scenario.driver.rules.clone(), self.clock.clone()).map_err(|e| {
            SimError::Start {
                slot: "driver".into(),
                reason: e.to_string(),
            }
        })?;
        Ok(Arc::new(a))
    }

    fn build(&mut self, slot: &str, adopt: Option<(String, u64)>) -> Result<Box<dyn Component>, SimError> {
        let s = self.scenario;
        let fail = |reason: String| SimError::Start {
            slot: slot.to_string(),
            reason,
        };
        Ok(match slot {
            "driver" => {
                let (id, election) = match adopt {
                    Some((id, pos)) => (id, Some(pos)),
                    None => {
                        self.driver_gen += 1;
                        (format!("driver-{}", self.driver_gen), None)
                    }
                };
                let settings = DriverSettings::with_system_prompt(s.driver.system_prompt.clone());
                let d = Driver::new(self.ctx(Role::Driver, &id), self.adapter()?, settings);
                Box::new(match election {
                    Some(pos) => d.adopt_election(pos),
                    None => d,
                })
            }
            "decider" => Box::new(Decider::new(
                self.ctx(Role::Decider, slot),
                s.decider.policy.clone(),
                Duration::from_millis(s.decider.timeout_ms),
            )),
            "executor" => {
                let counter = self.side_effects.clone();
                let limit = self.side_effect_kill.clone();
                let hook = Box::new(move || {
                    let n = counter.fetch_add(1, Ordering::SeqCst) + 1;
                    let mut limit = limit.lock().unwrap();
                    match *limit {
                        Some(k) if n > k => {
                            *limit = None;
                            false
                        }
                        _ => true,
                    }
                });
                let sandbox = Sandbox::new(&self.sandbox)
                    .map_err(|e| fail(e.to_string()))?
                    .with_timeout(Duration::from_millis(s.executor.action_timeout_ms))
                    .with_hook(hook);
                let log = self.executions.clone();
                let id = slot.to_string();
                let observer = Box::new(move |intent, tail| {
                    log.lock().unwrap().push(Execution {
                        intent,
                        tail,
                        executor: id.clone(),
                    })
                });
                Box::new(Executor::new(self.ctx(Role::Executor, slot), sandbox).with_observer(observer))
            }
            voter => {
                let spec = self
                    .voter_spec(voter)
                    .ok_or_else(|| fail("no such component".into()))?
                    .clone();
                let v = Voter::new(self.ctx(Role::Voter, voter), &spec.config.voter_type, spec.config.behavior)
                    .map_err(|e| fail(e.to_string()))?;
                Box::new(v)
            }
        })
    }

    fn is_alive(&self, slot: &str) -> bool {
        self.instances.iter().any(|i| i.slot == slot)
    }

    fn spawn(&mut self, slot: &str) -> Result<(), SimError> {
        let comp = self.build(slot, None)?;
        self.faulty.revive(comp.id());
        self.event(format!("start {} as {}", slot, comp.id()));
        self.instances.push(Instance {
            slot: slot.to_string(),
            comp,
        });
        Ok(())
    }

    fn kill_slot(&mut self, slot: &str) {
        let ids: Vec<String> = self
            .instances
            .iter()
            .filter(|i| i.slot == slot)
            .map(|i| i.comp.id().to_string())
            .collect();
        for id in &ids {
            self.faulty.kill(id);
        }
        self.instances.retain(|i| i.slot != slot);
    }

    fn fire_fault(&mut self, target: &str, kind: FaultKind) -> Result<(), SimError> {
        self.event(format!("fault {kind:?} on {target}"));
        match kind {
            FaultKind::Kill => self.kill_slot(target),
            FaultKind::Crash => {
                self.kill_slot(target);
                self.spawn(target)?;
            }
            FaultKind::Pause => {
                self.paused.insert(target.to_string());
            }
            FaultKind::Resume => {
                self.paused.remove(target);
            }
            FaultKind::Restart => {
                if !self.is_alive(target) {
                    self.spawn(target)?;
                }
            }
            FaultKind::Usurp => {
                let victim = self
                    .instances
                    .iter()
                    .rev()
                    .find(|i| i.slot == "driver")
                    .map(|i| i.comp.id().to_string());
                if let Some(victim) = victim {
                    self.driver_gen += 1;
                    let usurper = format!("driver-{}", self.driver_gen);
                    self.faulty.arm_usurp(&victim, &usurper);
                }
            }
        }
        Ok(())
    }

    fn fire(&mut self, item: Pending) -> Result<(), SimError> {
        match item {
            Pending::Fault(f) => self.fire_fault(&f.target, f.kind),
            Pending::Work(w) => match w.action {
                WorkloadAction::Mail { sender, body } => {
                    let user = BusClient::new(self.bus.clone(), Role::User.identity(&sender));
                    user.append(Payload::mail(sender.as_str(), body))?;
                    Ok(())
                }
                WorkloadAction::Policy(doc) => {
                    let parsed = crate::policy::parse_policy_value(&doc).expect("validated when loaded");
                    self.event(format!("policy {}", doc));
                    self.admin.append(parsed.to_payload("admin"))?;
                    Ok(())
                }
                WorkloadAction::Fault { target, kind } => self.fire_fault(&target, kind),
                WorkloadAction::RepeatCommit => {
                    let log = self.admin.read_from(0)?;
                    let last = log.iter().rev().find_map(|e| match &e.payload {
                        Payload::Commit(c) => Some(c.intent_position),
                        _ => None,
                    });
                    if let Some(p) = last {
                        self.event(format!("repeat commit for @{p}"));
                        self.admin.append(Payload::commit(p))?;
                    }
                    Ok(())
                }
                WorkloadAction::Forge => {
                    let p = self.admin.read_from(0)?.iter().rev().find_map(|e| match e.payload {
                        Payload::Intent(_) => Some(e.position),
                        _ => None,
                    });
                    let forger = BusClient::new(self.bus.clone(), Role::Executor.identity("forger"));
                    let p = p.unwrap_or(0);
                    let attempts = [
                        Payload::Vote(agentbus::VoteBody {
                            intent_position: p,
                            voter_type: "rule".into(),
                            voter_id: "forger".into(),
                            verdict: agentbus::Verdict::Approve,
                            rationale: "forged".into(),
                        }),
                        Payload::commit(p),
                        Payload::abort(p, "forged"),
                        crate::policy::PolicyDocument::Decider(crate::policy::DeciderPolicy::OnByDefault).to_payload("forger"),
                    ];
                    let mut refused = 0;
                    for a in attempts {
                        match forger.append(a) {
                            Err(e) if e.is_permission_denied() => refused += 1,
                            Err(e) => return Err(e.into()),
                            Ok(pos) => self.event(format!("forged append landed at @{pos}")),
                        }
                    }
                    self.event(format!("forge attempts refused: {refused}/4"));
                    Ok(())
                }
            },
        }
    }

    fn due(&self, t: &Trigger) -> bool {
        match t {
            Trigger::Appends(n) => self.admin.tail() >= *n,
            Trigger::TimeMs(ms) => self.now() >= SIM_EPOCH_MS.saturating_add(*ms),
            _ => false,
        }
    }

    fn fire_due(&mut self) -> Result<bool, SimError> {
        let mut fired = false;
        let mut i = 0;
        while i < self.pending.len() {
            if self.due(self.pending[i].trigger()) {
                let item = self.pending.remove(i).expect("index in range");
                self.fire(item)?;
                fired = true;
            } else {
                i += 1;
            }
        }
        Ok(fired)
    }

    fn fire_idle(&mut self) -> Result<bool, SimError> {
        let pick = self
            .pending
            .iter()
            .position(|p| matches!(p, Pending::Work(_)) && *p.trigger() == Trigger::Idle)
            .or_else(|| self.pending.iter().position(|p| *p.trigger() == Trigger::Idle));
        match pick {
            Some(i) => {
                let item = self.pending.remove(i).expect("index in range");
                self.fire(item)?;
                Ok(true)
            }
            None => Ok(false),
        }
    }

    /// One shuffled pass over the live instances.
    fn step_all(&mut self) -> Result<bool, SimError> {
        let mut order: Vec<usize> = (0..self.instances.len()).collect();
        order.shuffle(&mut self.rng);
        let mut progressed = false;
        let mut dead = BTreeSet::new();
        for i in order {
            let inst = &mut self.instances[i];
            if self.paused.contains(&inst.slot) {
                continue;
            }
            let before = self.faulty.inner().tail(&ClientIdentity::admin("sim"));
            let result = inst.comp.step(Duration::ZERO);
            let after = self.faulty.inner().tail(&ClientIdentity::admin("sim"));
            progressed |= after != before;
            let id = inst.comp.id().to_string();
            match result {
                Ok(out) => progressed |= out.progressed(),
                Err(e) if e.is_terminal() => {
                    dead.insert(i);
                    let msg = match e {
                        ComponentError::Fenced { position } => format!("{id} fenced by the election at @{position}"),
                        e => format!("{id} died: {e}"),
                    };
                    self.event(msg);
                    self.faulty.kill(&id);
                    continue;
                }
                Err(e) => self.event(format!("{id} step failed: {e}")),
            }
            if self.faulty.is_killed(&id) {
                dead.insert(i);
                self.event(format!("{id} killed"));
            }
            if let Some((usurper, pos)) = self.faulty.take_usurped() {
                let comp = self.build("driver", Some((usurper.clone(), pos)))?;
                self.event(format!("{usurper} usurped the driver seat at @{pos}"));
                self.instances.push(Instance {
                    slot: "driver".into(),
                    comp,
                });
                progressed = true;
            }
        }
        let mut restart = Vec::new();
        let mut idx = 0;
        self.instances.retain(|inst| {
            let keep = !dead.contains(&idx);
            if !keep {
                restart.push(inst.slot.clone());
            }
            idx += 1;
            keep
        });
        for slot in restart {
            if self.crash_restart.remove(&slot) && !self.is_alive(&slot) {
                self.spawn(&slot)?;
                progressed = true;
            }
        }
        Ok(progressed)
    }

    /// The next clock time at which something is scheduled.
    fn next_time(&self) -> Option<u64> {
        let now = self.now();
        let deadlines = self
            .instances
            .iter()
            .filter(|i| !self.paused.contains(&i.slot))
            .filter_map(|i| i.comp.next_deadline());
        let timers = self.pending.iter().filter_map(|p| match p.trigger() {
            Trigger::TimeMs(ms) => Some(SIM_EPOCH_MS.saturating_add(*ms)),
            _ => None,
        });
        deadlines.chain(timers).filter(|t| *t > now).min()
    }

    fn advance_to(&self, t: u64) {
        match &self.virtual_clock {
            Some(vc) => vc.advance_to(t),
            None => {
                let now = self.now();
                std::thread::sleep(Duration::from_millis(t.saturating_sub(now)));
            }
        }
    }

    fn run_loop(&mut self) -> Result<(u64, bool), SimError> {
        let mut round = 0;
        while round < self.scenario.max_rounds {
            round += 1;
            self.fire_due()?;
            if self.step_all()? {
                continue;
            }
            if let Some(t) = self.next_time() {
                self.advance_to(t);
                continue;
            }
            if self.fire_idle()? {
                continue;
            }
            return Ok((round, true));
        }
        Ok((round, false))
    }

    fn finish(mut self, seed: u64, rounds: u64, quiescent: bool) -> Result<ScenarioRun, SimError> {
        let log = self.faulty.inner().read(&ClientIdentity::admin("sim"), 0, u64::MAX)?;
        let records = self.faulty.records();
        let executions = self.executions.lock().unwrap().clone();
        let violations = check_run(&self.scenario.decider.policy, &log, &records, &executions);
        let oracles = self
            .scenario
            .oracles
            .iter()
            .map(|o| self.evaluate(o, &log, quiescent))
            .collect();
        let replay_mismatches = self.replay_check()?;
        let mut h = Sha256::new();
        for e in &log {
            h.update(agentbus::record::encode(e.position, e.realtime_ts, &e.payload));
        }
        let bus_digest = hex::encode(h.finalize());
        let sandbox_digest = tree_digest(&self.sandbox)?;
        let first_ts = log.first().map(|e| e.realtime_ts).unwrap_or(0);
        let last_ts = log.last().map(|e| e.realtime_ts).unwrap_or(0);
        if !quiescent {
            self.event(format!("stopped after {rounds} rounds without quiescence"));
        }
        let report = ScenarioReport {
            scenario: self.scenario.name.clone(),
            seed,
            rounds,
            quiescent,
            entries: log.len() as u64,
            elapsed_ms: last_ts.saturating_sub(first_ts),
            bus_digest,
            sandbox_digest,
            metrics: StageMetrics::from_entries(&log),
            violations,
            oracles,
            replay_mismatches,
            executions,
            events: std::mem::take(&mut self.events),
        };
        self.bus.close();
        Ok(ScenarioRun {
            report,
            log,
            records,
            sandbox: self.sandbox.clone(),
        })
    }

    fn live_driver(&self) -> Option<&Instance> {
        let drivers: Vec<&Instance> = self.instances.iter().filter(|i| i.slot == "driver").collect();
        match drivers.as_slice() {
            [one] => Some(one),
            _ => None,
        }
    }

    fn evaluate(&self, oracle: &Oracle, log: &[Entry], quiescent: bool) -> OracleResult {
        let (passed, detail) = match oracle {
            Oracle::Completed => match self.live_driver() {
                None => (false, "no single live driver".to_string()),
                Some(d) => {
                    let s = d.comp.state_json();
                    let idle = s["phase"] == "idle"
                        && s["pending_intent"].is_null()
                        && s["buffered_mail"].as_array().is_some_and(|m| m.is_empty());
                    let undecided = crate::components::DeciderState::replay(
                        self.scenario.decider.policy.clone(),
                        Duration::from_millis(self.scenario.decider.timeout_ms),
                        log,
                    )
                    .pending
                    .len();
                    (
                        quiescent && idle && undecided == 0,
                        format!("quiescent={quiescent} driver phase={} undecided={undecided}", s["phase"]),
                    )
                }
            },
            Oracle::ResultContains { text } => {
                let hit = log.iter().any(|e| {
                    matches!(&e.payload, Payload::Result(r)
                        if r.status == ResultStatus::Ok && r.output.contains(text.as_str()))
                });
                (hit, String::new())
            }
            Oracle::FileItems { path, from, to } => file_items(&self.sandbox.join(path), *from, *to),
            Oracle::SingleLiveEpoch => {
                let last = log
                    .iter()
                    .filter(|e| matches!(&e.payload, Payload::Policy(p) if p.kind == PolicyKind::DriverElection))
                    .filter_map(election_of)
                    .next_back();
                match (self.live_driver(), last) {
                    (Some(d), Some(el)) => (
                        el.candidate == d.comp.id(),
                        format!("live {} / elected {}", d.comp.id(), el.candidate),
                    ),
                    _ => (
                        false,
                        format!(
                            "{} live drivers",
                            self.instances.iter().filter(|i| i.slot == "driver").count()
                        ),
                    ),
                }
            }
            Oracle::IntrospectionFirst { introspect, work } => introspection_first(log, introspect, work),
        };
        OracleResult {
            oracle: oracle.name(),
            passed,
            detail,
        }
    }

    /// Fresh instances that only replay the log must agree with the live ones.
    fn replay_check(&self) -> Result<Vec<String>, SimError> {
        let mut mismatches = Vec::new();
        let s = self.scenario;
        // a paused instance is legitimately behind the log
        for inst in self.instances.iter().filter(|i| !self.paused.contains(&i.slot)) {
            let id = inst.comp.id().to_string();
            let client = BusClient::new(self.faulty.inner().clone(), inst.comp.role().identity(&id));
            let ctx = ComponentContext::new(client, self.clock.clone());
            let fresh = match inst.slot.as_str() {
                "executor" => continue,
                "driver" => {
                    let mut d = Driver::new(ctx, self.adapter()?, DriverSettings::default());
                    d.catch_up().map(|_| d.state_json())
                }
                "decider" => {
                    let mut d = Decider::new(
                        ctx,
                        s.decider.policy.clone(),
                        Duration::from_millis(s.decider.timeout_ms),
                    );
                    d.catch_up().map(|_| d.state_json())
                }
                voter => {
                    let spec = self.voter_spec(voter).expect("running voters are declared");
                    let mut v = Voter::new(ctx, &spec.config.voter_type, spec.config.behavior.clone())
                        .map_err(|e| SimError::Start {
                            slot: voter.to_string(),
                            reason: e.to_string(),
                        })?;
                    v.catch_up().map(|_| v.state_json())
                }
            };
            match fresh {
                Ok(state) if state == inst.comp.state_json() => {}
                Ok(_) => mismatches.push(id),
                Err(e) => mismatches.push(format!("{id}: {e}")),
            }
        }
        Ok(mismatches)
    }
}

fn file_items(path: &Path, from: u64, to: u64) -> (bool, String) {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => return (false, format!("{}: {e}", path.display())),
    };
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for line in text.lines() {
        *counts.entry(line).or_default() += 1;
    }
    let expected: BTreeSet<String> = (from..=to).map(|i| format!("item-{i}")).collect();
    let missing = expected.iter().filter(|k| !counts.contains_key(k.as_str())).count();
    let repeated = counts.values().filter(|n| **n > 1).count();
    let foreign = counts.keys().filter(|k| !expected.contains(**k)).count();
    (
        missing == 0 && repeated == 0 && foreign == 0,
        format!("{} lines, {missing} missing, {repeated} repeated, {foreign} unexpected", text.lines().count()),
    )
}

fn introspection_first(log: &[Entry], introspect: &str, work: &str) -> (bool, String) {
    let recoveries: Vec<u64> = log
        .iter()
        .filter(|e| matches!(&e.payload, Payload::Result(r) if r.status == ResultStatus::Recovery))
        .map(|e| e.position)
        .collect();
    let [_, .., last] = recoveries.as_slice() else {
        return (false, "the executor never restarted".into());
    };
    let body = |e: &Entry| match &e.payload {
        Payload::Intent(i) => Some(i.action.body.clone()),
        _ => None,
    };
    let after: Vec<String> = log.iter().filter(|e| e.position > *last).filter_map(body).collect();
    let first_look = after.iter().position(|b| b.contains(introspect));
    let first_work = after.iter().position(|b| b.contains(work));
    match (first_look, first_work) {
        (Some(0), Some(w)) if w > 0 => (true, format!("introspected, then worked at intent #{w}")),
        (Some(0), None) => (true, "introspected; nothing left to do".into()),
        _ => (false, format!("intents after recovery: {after:?}")),
    }
}

/// sha256 over relative paths and file contents, in sorted order.
pub fn tree_digest(root: &Path) -> std::io::Result<String> {
    fn walk(dir: &Path, base: &Path, out: &mut Vec<(String, Option<Vec<u8>>)>) -> std::io::Result<()> {
        let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<_, _>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let path = e.path();
            let rel = path.strip_prefix(base).expect("under base").to_string_lossy().into_owned();
            let ty = e.file_type()?;
            if ty.is_dir() {
                out.push((rel, None));
                walk(&path, base, out)?;
            } else if ty.is_file() {
                out.push((rel, Some(std::fs::read(&path)?)));
            } else {
                out.push((rel, Some(std::fs::read_link(&path)?.to_string_lossy().into_owned().into_bytes())));
            }
        }
        Ok(())
    }
    let mut items = Vec::new();
    walk(root, root, &mut items)?;
    let mut h = Sha256::new();
    for (rel, content) in items {
        h.update(rel.as_bytes());
        h.update([0]);
        match content {
            None => h.update(b"dir"),
            Some(bytes) => {
                h.update((bytes.len() as u64).to_le_bytes());
                h.update(&bytes);
            }
        }
    }
    Ok(hex::encode(h.finalize()))
}
