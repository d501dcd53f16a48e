//! Where the time and the bytes went, read off a finished log.

use std::collections::{BTreeMap, BTreeSet};

use agentbus::{Entry, Payload, Position};
use serde::Serialize;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StageMetrics {
    /// InfIn to the InfOut that answers it.
    pub inferring_ms: u64,
    /// Intent to the last vote before its decision.
    pub voting_ms: u64,
    /// Last vote (or the intent, without votes) to the decision.
    pub deciding_ms: u64,
    /// Commit to the result.
    pub executing_ms: u64,
    /// Encoded body bytes per payload type.
    pub bytes_by_type: BTreeMap<String, u64>,
    pub entries_by_type: BTreeMap<String, u64>,
}

impl StageMetrics {
    pub fn from_entries(entries: &[Entry]) -> Self {
        let mut m = StageMetrics::default();
        let mut open_infin: Option<u64> = None;
        let mut intent_ts: BTreeMap<Position, u64> = BTreeMap::new();
        let mut last_vote: BTreeMap<Position, u64> = BTreeMap::new();
        let mut decided = BTreeSet::new();
        let mut commit_ts: BTreeMap<Position, u64> = BTreeMap::new();
        for e in entries {
            let ty = e.payload_type().to_string();
            *m.bytes_by_type.entry(ty.clone()).or_default() += e.body_len() as u64;
            *m.entries_by_type.entry(ty).or_default() += 1;
            let ts = e.realtime_ts;
            match &e.payload {
                Payload::InfIn(_) => open_infin = Some(ts),
                Payload::InfOut(_) => {
                    if let Some(start) = open_infin.take() {
                        m.inferring_ms += ts.saturating_sub(start);
                    }
                }
                Payload::Intent(_) => {
                    intent_ts.insert(e.position, ts);
                }
                Payload::Vote(v) if !decided.contains(&v.intent_position) => {
                    last_vote.insert(v.intent_position, ts);
                }
                Payload::Commit(_) | Payload::Abort(_) => {
                    let p = e.payload.intent_ref().expect("decisions reference an intent");
                    if !decided.insert(p) {
                        continue;
                    }
                    let Some(&start) = intent_ts.get(&p) else {
                        continue;
                    };
                    let voted = last_vote.get(&p).copied();
                    if let Some(v) = voted {
                        m.voting_ms += v.saturating_sub(start);
                    }
                    m.deciding_ms += ts.saturating_sub(voted.unwrap_or(start));
                    if matches!(e.payload, Payload::Commit(_)) {
                        commit_ts.insert(p, ts);
                    }
                }
                Payload::Result(r) => {
                    if let Some(c) = r.intent_position.and_then(|p| commit_ts.get(&p)) {
                        m.executing_ms += ts.saturating_sub(*c);
                    }
                }
                _ => {}
            }
        }
        m
    }

    pub fn total_bytes(&self) -> u64 {
        self.bytes_by_type.values().sum()
    }

    /// `stage,ms` rows followed by `type,entries,bytes` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,ms\n");
        for (stage, ms) in [
            ("inferring", self.inferring_ms),
            ("voting", self.voting_ms),
            ("deciding", self.deciding_ms),
            ("executing", self.executing_ms),
        ] {
            out.push_str(&format!("{stage},{ms}\n"));
        }
        out.push_str("\ntype,entries,bytes\n");
        for (ty, bytes) in &self.bytes_by_type {
            let n = self.entries_by_type.get(ty).copied().unwrap_or(0);
            out.push_str(&format!("{ty},{n},{bytes}\n"));
        }
        out
    }
}
