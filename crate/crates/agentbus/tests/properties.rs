use std::collections::BTreeSet;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use agentbus::{
    AgentBus, BusError, ClientIdentity, DurableBus, MemoryBus, Payload, PayloadType, Permissions,
    PolicyKind, SyncMode, TypeSet, VirtualClock,
};
use proptest::prelude::*;

fn payload_of(ty: PayloadType, text: String) -> Payload {
    match ty {
        PayloadType::InfIn => Payload::InfIn(agentbus::InfInBody {
            delta: vec![agentbus::Message::new(agentbus::MessageRole::User, text)],
            driver_epoch: 1,
        }),
        PayloadType::InfOut => Payload::InfOut(agentbus::InfOutBody {
            text,
            intent_extracted: false,
            driver_epoch: 1,
        }),
        PayloadType::Intent => Payload::intent(agentbus::ActionSpec::shell(text), 1, 1),
        PayloadType::Vote => Payload::Vote(agentbus::VoteBody {
            intent_position: 0,
            voter_type: "rule".into(),
            voter_id: "r".into(),
            verdict: agentbus::Verdict::Approve,
            rationale: text,
        }),
        PayloadType::Commit => Payload::commit(text.len() as u64),
        PayloadType::Abort => Payload::abort(0, text),
        PayloadType::Result => Payload::result(None, agentbus::ResultStatus::Ok, text),
        PayloadType::Mail => Payload::mail("u", text),
        PayloadType::Policy => Payload::policy(PolicyKind::Voter, "a", serde_json::json!({ "t": text })),
    }
}

fn payload_type() -> impl Strategy<Value = PayloadType> {
    (0..PayloadType::ALL.len()).prop_map(|i| PayloadType::ALL[i])
}

fn type_set() -> impl Strategy<Value = TypeSet> {
    prop::collection::vec(payload_type(), 0..6).prop_map(|ts| TypeSet::of(&ts))
}

fn permissions() -> impl Strategy<Value = Permissions> {
    (type_set(), type_set(), type_set()).prop_map(|(a, r, p)| {
        let mut poll = TypeSet::empty();
        for t in PayloadType::ALL {
            if p.contains(t) && r.contains(t) {
                poll.insert(t);
            }
        }
        Permissions::new(a, r, poll).expect("pollable is within readable")
    })
}

fn admin() -> ClientIdentity {
    ClientIdentity::admin("admin")
}

#[derive(Debug, Clone)]
enum Op {
    Append(usize, PayloadType, String),
    Read(usize, u64, u64),
    Poll(usize, u64, TypeSet),
    Tail(usize),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => (0..3usize, payload_type(), "[a-z\n\"]{0,40}").prop_map(|(c, t, s)| Op::Append(c, t, s)),
        1 => (0..3usize, 0..30u64, 0..30u64).prop_map(|(c, a, b)| Op::Read(c, a, b)),
        1 => (0..3usize, 0..30u64, type_set()).prop_map(|(c, s, f)| Op::Poll(c, s, f)),
        1 => (0..3usize).prop_map(Op::Tail),
    ]
}

fn run(bus: &dyn AgentBus, who: &ClientIdentity, op: &Op) -> String {
    fn show<T: std::fmt::Debug>(r: Result<T, BusError>) -> String {
        match r {
            Ok(v) => format!("{v:?}"),
            Err(e) => format!("error: {e}"),
        }
    }
    match op {
        Op::Append(_, t, s) => show(bus.append(who, payload_of(*t, s.clone()))),
        Op::Read(_, a, b) => show(bus.read(who, *a, *b)),
        Op::Poll(_, s, f) => show(bus.poll(who, *s, *f, Duration::ZERO)),
        Op::Tail(_) => bus.tail(who).to_string(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn appends_follow_the_acl(perms in permissions(), types in prop::collection::vec(payload_type(), 1..20)) {
        let bus = MemoryBus::new();
        let who = ClientIdentity::new("c", perms);
        let mut expected = 0u64;
        for t in types {
            let r = bus.append(&who, payload_of(t, String::new()));
            if perms.can_append(t) {
                prop_assert_eq!(r.unwrap(), expected);
                expected += 1;
            } else {
                prop_assert!(r.unwrap_err().is_permission_denied());
            }
            prop_assert_eq!(bus.tail(&who), expected);
        }
    }

    #[test]
    fn reads_show_exactly_the_readable_types(perms in permissions(), types in prop::collection::vec(payload_type(), 0..20)) {
        let bus = MemoryBus::new();
        for t in &types {
            bus.append(&admin(), payload_of(*t, String::new())).unwrap();
        }
        let who = ClientIdentity::new("c", perms);
        let seen = bus.read(&who, 0, types.len() as u64).unwrap();
        let want: Vec<u64> = types
            .iter()
            .enumerate()
            .filter(|(_, t)| perms.can_read(**t))
            .map(|(i, _)| i as u64)
            .collect();
        prop_assert_eq!(seen.iter().map(|e| e.position).collect::<Vec<_>>(), want);
    }

    #[test]
    fn polls_outside_the_pollable_set_are_refused(perms in permissions(), filter in type_set()) {
        let bus = MemoryBus::new();
        bus.append(&admin(), Payload::mail("u", "x")).unwrap();
        let who = ClientIdentity::new("c", perms);
        let r = bus.poll(&who, 0, filter, Duration::ZERO);
        if filter.is_empty() {
            prop_assert!(matches!(r, Err(BusError::EmptyFilter)));
        } else if filter.is_subset(perms.pollable) {
            let got = r.unwrap();
            let want = usize::from(filter.contains(PayloadType::Mail));
            prop_assert_eq!(got.len(), want);
        } else {
            prop_assert!(r.unwrap_err().is_permission_denied());
        }
    }

    #[test]
    fn memory_and_durable_agree(perms in prop::collection::vec(permissions(), 3), ops in prop::collection::vec(op(), 1..40)) {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(VirtualClock::new(10));
        let memory = MemoryBus::with_clock(clock.clone());
        let path = dir.path().join("bus.log");
        let durable = DurableBus::open_with_clock(&path, SyncMode::batched(), clock.clone()).unwrap();
        let clients: Vec<ClientIdentity> = perms
            .into_iter()
            .enumerate()
            .map(|(i, p)| if i == 0 { admin() } else { ClientIdentity::new(format!("c{i}"), p) })
            .collect();
        for op in &ops {
            let c = match op {
                Op::Append(c, ..) | Op::Read(c, ..) | Op::Poll(c, ..) | Op::Tail(c) => *c,
            };
            prop_assert_eq!(run(&memory, &clients[c], op), run(&durable, &clients[c], op), "{:?}", op);
            clock.advance(Duration::from_millis(1));
        }
        drop(durable);
        let reopened = DurableBus::open(&path, SyncMode::Always).unwrap();
        prop_assert_eq!(reopened.entries().unwrap(), memory.snapshot_entries());
    }
}

fn concurrent_appends(bus: Arc<dyn AgentBus>, handles: Vec<Arc<dyn AgentBus>>) {
    const THREADS: usize = 8;
    const PER_THREAD: usize = 50;
    let workers: Vec<_> = (0..THREADS)
        .map(|t| {
            let bus = handles[t % handles.len()].clone();
            thread::spawn(move || {
                let who = ClientIdentity::admin(format!("w{t}"));
                (0..PER_THREAD)
                    .map(|i| bus.append(&who, Payload::mail(format!("w{t}"), i.to_string())).unwrap())
                    .collect::<Vec<u64>>()
            })
        })
        .collect();
    let per_thread: Vec<Vec<u64>> = workers.into_iter().map(|w| w.join().unwrap()).collect();
    let all: BTreeSet<u64> = per_thread.iter().flatten().copied().collect();
    assert_eq!(all.len(), THREADS * PER_THREAD, "positions are unique");
    assert_eq!(all.iter().copied().collect::<Vec<_>>(), (0..(THREADS * PER_THREAD) as u64).collect::<Vec<_>>());
    let entries = bus.read(&admin(), 0, (THREADS * PER_THREAD) as u64).unwrap();
    for (t, positions) in per_thread.iter().enumerate() {
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        for (i, p) in positions.iter().enumerate() {
            let agentbus::Payload::Mail(m) = &entries[*p as usize].payload else {
                panic!("not mail");
            };
            assert_eq!((m.sender.as_str(), m.body.as_str()), (format!("w{t}").as_str(), i.to_string().as_str()));
        }
    }
}

#[test]
fn concurrent_appends_on_memory() {
    let bus: Arc<dyn AgentBus> = Arc::new(MemoryBus::new());
    concurrent_appends(bus.clone(), vec![bus]);
}

#[test]
fn concurrent_appends_through_two_durable_handles() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bus.log");
    let a: Arc<dyn AgentBus> = Arc::new(DurableBus::open(&path, SyncMode::batched()).unwrap());
    let b: Arc<dyn AgentBus> = Arc::new(DurableBus::open(&path, SyncMode::batched()).unwrap());
    concurrent_appends(a.clone(), vec![a, b]);
}

#[test]
fn blocked_poller_wakes_on_a_matching_append() {
    let bus = Arc::new(MemoryBus::new());
    let poller = {
        let bus = bus.clone();
        thread::spawn(move || bus.poll(&admin(), 0, TypeSet::of(&[PayloadType::Commit]), Duration::from_secs(10)))
    };
    thread::sleep(Duration::from_millis(50));
    bus.append(&admin(), Payload::mail("u", "not yet")).unwrap();
    bus.append(&admin(), Payload::commit(0)).unwrap();
    let got = poller.join().unwrap().unwrap();
    assert_eq!(got.len(), 1);
    assert_eq!(got[0].position, 1);
}

#[test]
fn durable_poll_sees_appends_from_another_handle() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bus.log");
    let reader = Arc::new(DurableBus::open(&path, SyncMode::Always).unwrap());
    let writer = DurableBus::open(&path, SyncMode::Always).unwrap();
    let poller = {
        let reader = reader.clone();
        thread::spawn(move || reader.poll(&admin(), 0, TypeSet::of(&[PayloadType::Mail]), Duration::from_secs(10)))
    };
    thread::sleep(Duration::from_millis(50));
    writer.append(&admin(), Payload::mail("u", "hi")).unwrap();
    assert_eq!(poller.join().unwrap().unwrap().len(), 1);
}
