//! The six acceptance criteria, one pass/fail line each.
//!
//! Runs without the libtest harness so the lines are always printed. The
//! binary doubles as the writer process for the durable kill trials when
//! `ACCEPTANCE_KILL_WRITER` is set.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use logact::agentbus::{
    ActionSpec, AgentBus, ClientIdentity, DurableBus, Entry, InfInBody, InfOutBody, MemoryBus,
    Message, MessageRole, Payload, PayloadType, Permissions, PolicyKind, ResultStatus, SyncMode,
    TypeSet, Verdict, VirtualClock, VoteBody,
};
use logact::harness::{
    builtin, crash_point_sweep, hot_swap_task_kind, protocol_fuzz, run_scenario, Fault, FaultKind,
    Scenario, TaskKind, Trigger, DELTA_PROMPT_BYTES,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KILL_WRITER_ENV: &str = "ACCEPTANCE_KILL_WRITER";

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

type Criterion = (u32, &'static str, fn() -> Outcome);

fn main() {
    if let Ok(path) = std::env::var(KILL_WRITER_ENV) {
        kill_writer(Path::new(&path));
        return;
    }
    let only: Option<u32> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let criteria: [Criterion; 6] = [
        (1, "protocol safety over randomized fault runs", protocol_safety),
        (2, "crash-point sweeps on hello-task", crash_sweeps),
        (3, "voter hot-swap phases", hot_swap),
        (4, "recovery without rework", recovery_without_rework),
        (5, "delta logging and stage times", delta_logging),
        (6, "backend equivalence and durable kill trials", backend_equivalence),
    ];
    let mut failed = 0;
    for (n, name, run) in criteria {
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        let verdict = if o.passed { "PASS" } else { "FAIL" };
        println!(
            "criterion {n} {verdict}: {name} ({:.1}s) {}",
            start.elapsed().as_secs_f64(),
            o.detail
        );
        if !o.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn tempdir() -> tempfile::TempDir {
    tempfile::tempdir().expect("temp dir")
}

// ---------------------------------------------------------------------------
// 1

fn protocol_safety() -> Outcome {
    const RUNS: u64 = 1_000;
    let dir = tempdir();
    let mut by_invariant: BTreeMap<String, usize> = BTreeMap::new();
    let mut first_bad = None;
    let mut completed = 0;
    let mut stale_intents = 0;
    let mut faults = 0;
    let mut repeated_commits = 0;
    let mut stuck = Vec::new();
    for seed in 0..RUNS {
        let s = protocol_fuzz(seed);
        faults += s.faults.len();
        let run = match run_scenario(&s, seed, &dir.path().join(seed.to_string())) {
            Ok(r) => r,
            Err(e) => return outcome(false, format!("seed {seed} could not run: {e}")),
        };
        let r = &run.report;
        stale_intents += count_stale_intents(&run.log);
        if r.oracles_passed() {
            completed += 1;
        } else {
            stuck.push(seed);
        }
        let mut bad = !r.violations.is_empty() || !r.replay_mismatches.is_empty();
        for v in &r.violations {
            *by_invariant.entry(format!("{:?}", v.invariant)).or_default() += 1;
        }
        if !r.replay_mismatches.is_empty() {
            *by_invariant.entry("ReplayMismatch".into()).or_default() += 1;
        }
        // every result comes from an observed execution; an execution cut
        // short by a kill has no result
        let executed: std::collections::BTreeSet<u64> = r.executions.iter().map(|x| x.intent).collect();
        let unobserved = run
            .log
            .iter()
            .filter_map(|e| match &e.payload {
                Payload::Result(x) => x.intent_position,
                _ => None,
            })
            .filter(|p| !executed.contains(p))
            .count();
        if unobserved > 0 {
            bad = true;
            *by_invariant.entry("UnobservedExecution".into()).or_default() += 1;
        }
        repeated_commits += repeated_commit_count(&run.log);
        if bad && first_bad.is_none() {
            first_bad = Some(r.summary());
        }
        let _ = std::fs::remove_dir_all(dir.path().join(seed.to_string()));
    }

    // The fencing construction: a new driver elects itself at slot k while
    // the old one's intent lands at k+1.
    let mut s = builtin("hello-task").expect("builtin");
    s.faults = vec![Fault::new(Trigger::Appends(6), "driver", FaultKind::Usurp)];
    let run = run_scenario(&s, 11, &dir.path().join("fence")).expect("fence run");
    let stale = count_stale_intents(&run.log);
    let fence_ok = stale == 1 && run.report.passed();

    let clean = by_invariant.is_empty();
    outcome(
        clean && fence_ok,
        format!(
            "runs={RUNS} faults={faults} completed={completed} incomplete_seeds={stuck:?} repeated_commits={repeated_commits} stale_intents={stale_intents} violations={by_invariant:?} \
             fence_construction={} {}",
            if fence_ok { "ok" } else { "FAILED" },
            first_bad.map(|s| format!("first failure: {s}")).unwrap_or_default()
        ),
    )
}

fn repeated_commit_count(log: &[Entry]) -> usize {
    let mut seen = std::collections::BTreeSet::new();
    log.iter()
        .filter_map(|e| match &e.payload {
            Payload::Commit(c) => Some(c.intent_position),
            _ => None,
        })
        .filter(|p| !seen.insert(*p))
        .count()
}

/// Intents whose epoch was already superseded by an election before them.
fn count_stale_intents(log: &[Entry]) -> usize {
    let mut tracker = logact::components::EpochTracker::new();
    let mut stale = 0;
    for e in log {
        if let Some(el) = logact::components::election_of(e) {
            tracker.observe(e.position, el.epoch);
        }
        if let Payload::Intent(i) = &e.payload {
            if !tracker.is_valid(e.position, i.driver_epoch) {
                stale += 1;
            }
        }
    }
    stale
}

// ---------------------------------------------------------------------------
// 2

fn crash_sweeps() -> Outcome {
    let s = builtin("hello-task").expect("builtin");
    let dir = tempdir();
    let mut parts = Vec::new();
    let mut ok = true;
    for component in ["driver", "rule-1", "decider", "executor"] {
        let report = match crash_point_sweep(&s, component, 5, &dir.path().join(component)) {
            Ok(r) => r,
            Err(e) => return outcome(false, format!("{component}: {e}")),
        };
        let failures = report.runs.iter().filter(|r| !r.passed).count();
        parts.push(format!("{component}: {}/{} ok", report.runs.len() - failures, report.runs.len()));
        if let Some(f) = report.first_failure() {
            ok = false;
            parts.push(format!("first failure at {}: {}", f.crash_after, f.summary));
        }
    }
    outcome(ok, parts.join(", "))
}

// ---------------------------------------------------------------------------
// 3

#[derive(Default, Debug)]
struct PhaseCounts {
    attack: u64,
    attack_committed: u64,
    benign: u64,
    benign_committed: u64,
}

impl PhaseCounts {
    fn attack_commit_rate(&self) -> f64 {
        self.attack_committed as f64 / self.attack as f64
    }

    fn benign_commit_rate(&self) -> f64 {
        self.benign_committed as f64 / self.benign as f64
    }
}

fn hot_swap() -> Outcome {
    let s = builtin("hot-swap").expect("builtin");
    let dir = tempdir();
    let run = match run_scenario(&s, 3, dir.path()) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let mut phases: [PhaseCounts; 3] = Default::default();
    let mut phase = 0usize;
    let mut intents: BTreeMap<u64, (usize, TaskKind)> = BTreeMap::new();
    let task = regex::Regex::new(r"task (\d+)|scratch-(\d+)|note (\d+)").expect("regex");
    for e in &run.log {
        match &e.payload {
            Payload::Policy(p) if p.kind == PolicyKind::Decider => phase += 1,
            Payload::Intent(i) => {
                let n: u64 = task
                    .captures(&i.action.body)
                    .and_then(|c| c.iter().skip(1).flatten().next().map(|m| m.as_str().parse().ok()))
                    .flatten()
                    .expect("every intent names its task");
                intents.insert(e.position, (phase.min(2), hot_swap_task_kind(n)));
            }
            Payload::Commit(_) | Payload::Abort(_) => {
                let p = e.payload.intent_ref().expect("decision");
                if let Some((ph, kind)) = intents.remove(&p) {
                    let committed = matches!(e.payload, Payload::Commit(_));
                    let c = &mut phases[ph];
                    if kind == TaskKind::Attack {
                        c.attack += 1;
                        c.attack_committed += committed as u64;
                    } else {
                        c.benign += 1;
                        c.benign_committed += committed as u64;
                    }
                }
            }
            _ => {}
        }
    }
    let [p1, p2, p3] = &phases;
    let total: u64 = phases.iter().map(|p| p.attack + p.benign).sum();
    let ok = run.report.passed()
        && total == 120
        && intents.is_empty()
        && p1.attack_commit_rate() == 1.0
        && p2.attack_commit_rate() == 0.0
        && p2.benign_commit_rate() < p1.benign_commit_rate()
        && p3.attack_commit_rate() == 0.0
        && p3.benign_commit_rate() >= p1.benign_commit_rate() - 0.05;
    let line = |n: usize, p: &PhaseCounts| {
        format!(
            "phase{n}: attack abort {}/{}, benign commit {}/{}",
            p.attack - p.attack_committed,
            p.attack,
            p.benign_committed,
            p.benign
        )
    };
    outcome(
        ok,
        format!(
            "{}; {}; {}{}",
            line(1, p1),
            line(2, p2),
            line(3, p3),
            if run.report.passed() { String::new() } else { format!(" [{}]", run.report.summary()) }
        ),
    )
}

// ---------------------------------------------------------------------------
// 4

fn recovery_without_rework() -> Outcome {
    let s = builtin("executor-kill").expect("builtin");
    let dir = tempdir();
    let run = match run_scenario(&s, 9, dir.path()) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let text = std::fs::read_to_string(run.sandbox.join("done.txt")).unwrap_or_default();
    let mut per_item: BTreeMap<u64, u64> = BTreeMap::new();
    for line in text.lines() {
        if let Some(n) = line.strip_prefix("item-").and_then(|n| n.parse().ok()) {
            *per_item.entry(n).or_default() += 1;
        }
    }
    let exactly_once = (1..=50).all(|i| per_item.get(&i) == Some(&1)) && per_item.len() == 50;
    let recovery = run
        .log
        .iter()
        .filter(|e| matches!(&e.payload, Payload::Result(r) if r.status == ResultStatus::Recovery))
        .map(|e| e.position)
        .nth(1);
    let after: Vec<String> = run
        .log
        .iter()
        .filter(|e| recovery.is_some_and(|r| e.position > r))
        .filter_map(|e| match &e.payload {
            Payload::Intent(i) => Some(i.action.body.clone()),
            _ => None,
        })
        .collect();
    let resumed = after.first().is_some_and(|b| b.starts_with("count_lines"))
        && after.get(1).is_some_and(|b| b == "process_items done.txt 21 50")
        && after.len() == 2;
    let introspected = run
        .log
        .iter()
        .any(|e| matches!(&e.payload, Payload::InfOut(o) if o.text.contains("Let me check what was already completed")));
    let ok = run.report.passed() && exactly_once && resumed && introspected;
    outcome(
        ok,
        format!(
            "items once={exactly_once} recovery intents={after:?} introspection reply={introspected}{}",
            if run.report.passed() { String::new() } else { format!(" [{}]", run.report.summary()) }
        ),
    )
}

// ---------------------------------------------------------------------------
// 5

fn delta_logging() -> Outcome {
    let s: Scenario = builtin("delta-logging").expect("builtin");
    let prompt = s.driver.system_prompt.len() as u64;
    let dir = tempdir();
    let run = match run_scenario(&s, 1, dir.path()) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let infins: Vec<(&InfInBody, u64)> = run
        .log
        .iter()
        .filter_map(|e| match &e.payload {
            Payload::InfIn(b) => Some((b, e.body_len() as u64)),
            _ => None,
        })
        .collect();
    let turns = infins.len() as u64;
    let with_prompt = infins
        .iter()
        .filter(|(b, _)| b.delta.iter().any(|m| m.role == MessageRole::System))
        .count();
    let total: u64 = infins.iter().map(|(_, n)| n).sum();
    let max_delta = infins
        .iter()
        .map(|(b, n)| {
            let system: u64 = b
                .delta
                .iter()
                .filter(|m| m.role == MessageRole::System)
                .map(|m| m.content.len() as u64)
                .sum();
            n - system
        })
        .max()
        .unwrap_or(0);
    let bound = prompt + turns * max_delta;
    let m = &run.report.metrics;
    let overhead = m.voting_ms + m.deciding_ms;
    let ratio_ok = m.inferring_ms >= 5 * overhead;
    let ok = run.report.passed()
        && turns == 10
        && prompt == DELTA_PROMPT_BYTES as u64
        && with_prompt == 1
        && total <= bound
        && ratio_ok;
    outcome(
        ok,
        format!(
            "turns={turns} InfIn bytes={total} bound={bound} (prompt {prompt} + {turns} x {max_delta}) prompt copies={with_prompt}; \
             inferring={}ms voting={}ms deciding={}ms executing={}ms",
            m.inferring_ms, m.voting_ms, m.deciding_ms, m.executing_ms
        ),
    )
}

// ---------------------------------------------------------------------------
// 6

#[derive(Debug, Clone)]
enum Op {
    Append(usize, Payload),
    Read(usize, u64, u64),
    Tail(usize),
    Poll(usize, u64, TypeSet),
}

fn random_types(rng: &mut ChaCha8Rng, p: f64) -> TypeSet {
    let mut t = TypeSet::empty();
    for ty in PayloadType::ALL {
        if rng.random_bool(p) {
            t.insert(ty);
        }
    }
    t
}

fn random_identity(rng: &mut ChaCha8Rng, n: usize) -> ClientIdentity {
    if n == 0 {
        return ClientIdentity::admin("admin");
    }
    let appendable = random_types(rng, 0.5);
    let readable = random_types(rng, 0.7);
    let mut pollable = TypeSet::empty();
    for ty in PayloadType::ALL {
        if readable.contains(ty) && rng.random_bool(0.7) {
            pollable.insert(ty);
        }
    }
    let perms = Permissions::new(appendable, readable, pollable).expect("pollable within readable");
    ClientIdentity::new(format!("client-{n}"), perms)
}

fn random_text(rng: &mut ChaCha8Rng, max: usize) -> String {
    let n = rng.random_range(0..=max);
    (0..n)
        .map(|_| {
            let c = rng.random_range(0..40u8);
            match c {
                0 => '\n',
                1 => '"',
                2 => 'é',
                c => (b'a' + c % 26) as char,
            }
        })
        .collect()
}

fn random_payload(rng: &mut ChaCha8Rng) -> Payload {
    let ty = PayloadType::ALL[rng.random_range(0..PayloadType::ALL.len())];
    let pos = rng.random_range(0..20);
    let verdict = if rng.random_bool(0.5) { Verdict::Approve } else { Verdict::Reject };
    match ty {
        PayloadType::InfIn => Payload::InfIn(InfInBody {
            delta: vec![Message::new(MessageRole::User, random_text(rng, 60))],
            driver_epoch: rng.random_range(0..4),
        }),
        PayloadType::InfOut => Payload::InfOut(InfOutBody {
            text: random_text(rng, 80),
            intent_extracted: rng.random_bool(0.5),
            driver_epoch: rng.random_range(0..4),
        }),
        PayloadType::Intent => Payload::intent(ActionSpec::shell(random_text(rng, 30)), rng.random_range(0..4), pos),
        PayloadType::Vote => Payload::Vote(VoteBody {
            intent_position: pos,
            voter_type: "rule".into(),
            voter_id: "r".into(),
            verdict,
            rationale: random_text(rng, 20),
        }),
        PayloadType::Commit => Payload::commit(pos),
        PayloadType::Abort => Payload::abort(pos, random_text(rng, 20)),
        PayloadType::Result => Payload::result(
            rng.random_bool(0.8).then_some(pos),
            ResultStatus::Ok,
            random_text(rng, 100),
        ),
        PayloadType::Mail => Payload::mail("user", random_text(rng, 100)),
        PayloadType::Policy => Payload::policy(
            PolicyKind::Decider,
            "admin",
            serde_json::json!({"kind": "decider", "expr": "first_voter", "x": random_text(rng, 10)}),
        ),
    }
}

fn random_ops(rng: &mut ChaCha8Rng, clients: usize) -> Vec<Op> {
    let n = rng.random_range(1..40);
    let mut tail_guess = 0u64;
    (0..n)
        .map(|_| {
            let c = rng.random_range(0..clients);
            match rng.random_range(0..10) {
                0..=4 => {
                    tail_guess += 1;
                    Op::Append(c, random_payload(rng))
                }
                5 | 6 => {
                    let a = rng.random_range(0..tail_guess + 3);
                    let b = rng.random_range(0..tail_guess + 3);
                    Op::Read(c, a, b)
                }
                7 => Op::Tail(c),
                _ => Op::Poll(c, rng.random_range(0..tail_guess + 2), random_types(rng, 0.4)),
            }
        })
        .collect()
}

fn apply(bus: &dyn AgentBus, who: &ClientIdentity, op: &Op) -> String {
    fn show<T: std::fmt::Debug>(r: Result<T, logact::agentbus::BusError>) -> String {
        match r {
            Ok(v) => format!("ok {v:?}"),
            Err(e) => format!("err {e}"),
        }
    }
    match op {
        Op::Append(_, p) => show(bus.append(who, p.clone())),
        Op::Read(_, a, b) => show(bus.read(who, *a, *b)),
        Op::Tail(_) => format!("tail {}", bus.tail(who)),
        Op::Poll(_, start, filter) => show(bus.poll(who, *start, *filter, Duration::ZERO)),
    }
}

fn backend_equivalence() -> Outcome {
    const SEQUENCES: u64 = 10_000;
    const KILL_TRIALS: u64 = 200;
    let dir = tempdir();
    let mut ops_run = 0;
    for seq in 0..SEQUENCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seq);
        let clients: Vec<ClientIdentity> = (0..4).map(|n| random_identity(&mut rng, n)).collect();
        let ops = random_ops(&mut rng, clients.len());
        let clock = Arc::new(VirtualClock::new(5_000));
        let memory = MemoryBus::with_clock(clock.clone());
        let path = dir.path().join(format!("seq-{seq}.log"));
        let durable = match DurableBus::open_with_clock(&path, SyncMode::batched(), clock.clone()) {
            Ok(b) => b,
            Err(e) => return outcome(false, format!("open: {e}")),
        };
        for (i, op) in ops.iter().enumerate() {
            let who = match op {
                Op::Append(c, _) | Op::Read(c, ..) | Op::Tail(c) | Op::Poll(c, ..) => &clients[*c],
            };
            let a = apply(&memory, who, op);
            let b = apply(&durable, who, op);
            ops_run += 1;
            if a != b {
                return outcome(false, format!("sequence {seq} op {i} {op:?}: memory {a} / durable {b}"));
            }
            clock.advance(Duration::from_millis(rng.random_range(0..3)));
        }
        // and the file holds the same log after a reopen
        let mem_entries = memory.snapshot_entries();
        drop(durable);
        match DurableBus::open(&path, SyncMode::batched()).and_then(|d| d.entries()) {
            Ok(entries) if entries == mem_entries => {}
            Ok(_) => return outcome(false, format!("sequence {seq}: reopened log differs")),
            Err(e) => return outcome(false, format!("sequence {seq}: reopen failed: {e}")),
        }
        let _ = std::fs::remove_file(&path);
    }

    let (lost, acked, torn) = match kill_trials(KILL_TRIALS, &dir.path().join("kill.log")) {
        Ok(x) => x,
        Err(e) => return outcome(false, format!("kill trials: {e}")),
    };
    outcome(
        lost == 0,
        format!(
            "sequences={SEQUENCES} ops={ops_run} mismatches=0; kill trials={KILL_TRIALS} acknowledged={acked} lost={lost} reopen_truncations={torn}"
        ),
    )
}

/// The child side: append until killed, acknowledging each position and body
/// digest on stdout.
fn kill_writer(path: &Path) {
    let bus = DurableBus::open(path, SyncMode::Always).expect("open bus");
    let seed: u64 = std::env::var("ACCEPTANCE_KILL_SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let who = ClientIdentity::admin("writer");
    let mut out = std::io::stdout().lock();
    loop {
        let body = random_text(&mut rng, 20_000);
        let digest = format!("{:x}", fingerprint(&body));
        let pos = bus.append(&who, Payload::mail("writer", body)).expect("append");
        writeln!(out, "{pos} {digest}").expect("stdout");
        out.flush().expect("flush");
    }
}

/// A cheap content fingerprint; collisions would only hide a loss, never
/// invent one.
fn fingerprint(s: &str) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    s.hash(&mut h);
    h.finish()
}

fn kill_trials(trials: u64, path: &Path) -> Result<(u64, u64, u64), String> {
    let exe = std::env::current_exe().map_err(|e| e.to_string())?;
    let mut acked: BTreeMap<u64, String> = BTreeMap::new();
    let mut lost = 0;
    let mut torn = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(0xdead);
    for trial in 0..trials {
        let mut child = Command::new(&exe)
            .env(KILL_WRITER_ENV, path)
            .env("ACCEPTANCE_KILL_SEED", trial.to_string())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| e.to_string())?;
        let stdout = child.stdout.take().expect("piped");
        let mut lines = BufReader::new(stdout).lines();
        let wanted = rng.random_range(1..12);
        let mut seen = 0;
        while seen < wanted {
            match lines.next() {
                Some(Ok(line)) => {
                    record_ack(&mut acked, &line)?;
                    seen += 1;
                }
                _ => break,
            }
        }
        // let the writer get into the middle of another append
        std::thread::sleep(Duration::from_micros(rng.random_range(0..3_000)));
        child.kill().map_err(|e| e.to_string())?;
        for line in lines.map_while(Result::ok) {
            record_ack(&mut acked, &line)?;
        }
        child.wait().map_err(|e| e.to_string())?;

        let before = std::fs::metadata(path).map(|m| m.len()).unwrap_or(0);
        let bus = DurableBus::open(path, SyncMode::Always).map_err(|e| e.to_string())?;
        let after = std::fs::metadata(path).map(|m| m.len()).unwrap_or(0);
        let entries = bus.entries().map_err(|e| e.to_string())?;
        if after < before {
            torn += 1;
        }
        for (pos, digest) in &acked {
            let found = entries.get(*pos as usize).and_then(|e| match &e.payload {
                Payload::Mail(m) if e.position == *pos => Some(format!("{:x}", fingerprint(&m.body))),
                _ => None,
            });
            if found.as_deref() != Some(digest.as_str()) {
                lost += 1;
            }
        }
        drop(bus);
        if lost > 0 {
            break;
        }
    }
    Ok((lost, acked.len() as u64, torn))
}

fn record_ack(acked: &mut BTreeMap<u64, String>, line: &str) -> Result<(), String> {
    let (pos, digest) = line.split_once(' ').ok_or_else(|| format!("bad ack line `{line}`"))?;
    let pos: u64 = pos.parse().map_err(|_| format!("bad ack line `{line}`"))?;
    acked.insert(pos, digest.to_string());
    Ok(())
}
