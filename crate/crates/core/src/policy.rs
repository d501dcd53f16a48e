//! Policy documents and the decider's quorum evaluator.
//!
//! Every policy travels on the bus as the body of a `Policy` entry. The body
//! is a JSON object with a `kind` discriminator and an optional schema
//! version `v` (only version 1 exists):
//!
//! ```text
//! {"v":1,"kind":"decider","expr":"on_by_default"}
//! {"v":1,"kind":"decider","expr":"first_voter"}
//! {"v":1,"kind":"decider","expr":"or","types":["rule","llm"]}
//! {"v":1,"kind":"decider","expr":"and","types":["rule","llm"]}
//! {"v":1,"kind":"decider","expr":"threshold","k":2,"types":["a","b","c"]}
//! {"v":1,"kind":"voter","target":"rule","body":{ ...voter specific... }}
//! {"v":1,"kind":"driver_election","epoch":3,"candidate":"driver-b"}
//! ```
//!
//! `boolean_or` and `boolean_and` are accepted as aliases of `or` and `and`.

use std::collections::BTreeMap;
use std::fmt;

use agentbus::{PolicyKind, Verdict, VoteBody};
use serde_json::{json, Map, Value};
use thiserror::Error;

pub const SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("malformed policy: {0}")]
pub struct MalformedPolicy(pub String);

fn malformed(msg: impl Into<String>) -> MalformedPolicy {
    MalformedPolicy(msg.into())
}

/// The decider's quorum expression over voter types.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum DeciderPolicy {
    /// Commit without waiting for any vote.
    #[default]
    OnByDefault,
    /// Follow whichever vote lands first, of any type.
    FirstVoter,
    Or(Vec<String>),
    And(Vec<String>),
    Threshold { k: usize, of: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoterPolicy {
    pub target_voter_type: String,
    pub body: Value,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DriverElection {
    pub epoch: u64,
    pub candidate: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PolicyDocument {
    Decider(DeciderPolicy),
    Voter(VoterPolicy),
    DriverElection(DriverElection),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Commit,
    Abort(String),
    Undecided,
}

impl Decision {
    pub fn is_final(&self) -> bool {
        !matches!(self, Decision::Undecided)
    }
}

impl DeciderPolicy {
    pub fn or<S: Into<String>>(types: impl IntoIterator<Item = S>) -> Self {
        DeciderPolicy::Or(types.into_iter().map(Into::into).collect())
    }

    pub fn and<S: Into<String>>(types: impl IntoIterator<Item = S>) -> Self {
        DeciderPolicy::And(types.into_iter().map(Into::into).collect())
    }

    pub fn threshold<S: Into<String>>(k: usize, of: impl IntoIterator<Item = S>) -> Self {
        DeciderPolicy::Threshold {
            k,
            of: of.into_iter().map(Into::into).collect(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DeciderPolicy::OnByDefault => "on_by_default",
            DeciderPolicy::FirstVoter => "first_voter",
            DeciderPolicy::Or(_) => "or",
            DeciderPolicy::And(_) => "and",
            DeciderPolicy::Threshold { .. } => "threshold",
        }
    }

    fn validate(&self) -> Result<(), MalformedPolicy> {
        let check_types = |types: &[String]| {
            if types.is_empty() {
                return Err(malformed(format!("`{}` needs at least one voter type", self.name())));
            }
            if types.iter().any(|t| t.trim().is_empty()) {
                return Err(malformed("empty voter type"));
            }
            let mut seen = std::collections::BTreeSet::new();
            if let Some(dup) = types.iter().find(|t| !seen.insert(t.as_str())) {
                return Err(malformed(format!("voter type `{dup}` listed twice")));
            }
            Ok(())
        };
        match self {
            DeciderPolicy::OnByDefault | DeciderPolicy::FirstVoter => Ok(()),
            DeciderPolicy::Or(t) | DeciderPolicy::And(t) => check_types(t),
            DeciderPolicy::Threshold { k, of } => {
                check_types(of)?;
                if *k == 0 || *k > of.len() {
                    return Err(malformed(format!(
                        "threshold k={k} must be in 1..={}",
                        of.len()
                    )));
                }
                Ok(())
            }
        }
    }

    /// Folds the votes cast so far on one intent into a decision.
    ///
    /// Votes are in log order. Only the first vote of each voter type counts,
    /// and types the expression does not list are ignored.
    pub fn evaluate(&self, votes: &[VoteBody]) -> Decision {
        match self {
            DeciderPolicy::OnByDefault => Decision::Commit,
            DeciderPolicy::FirstVoter => match votes.first() {
                None => Decision::Undecided,
                Some(v) if v.verdict == Verdict::Approve => Decision::Commit,
                Some(v) => Decision::Abort(format!(
                    "first_voter: {}/{} rejected: {}",
                    v.voter_type, v.voter_id, v.rationale
                )),
            },
            DeciderPolicy::Or(types) => {
                let firsts = first_per_type(votes, types);
                if firsts.values().any(|v| v.verdict == Verdict::Approve) {
                    Decision::Commit
                } else if firsts.len() == types.len() {
                    Decision::Abort(format!("or: every type rejected ({})", rejections(&firsts)))
                } else {
                    Decision::Undecided
                }
            }
            DeciderPolicy::And(types) => {
                let firsts = first_per_type(votes, types);
                let rejected: BTreeMap<_, _> = firsts
                    .iter()
                    .filter(|(_, v)| v.verdict == Verdict::Reject)
                    .map(|(k, v)| (*k, *v))
                    .collect();
                if !rejected.is_empty() {
                    Decision::Abort(format!("and: {}", rejections(&rejected)))
                } else if firsts.len() == types.len() {
                    Decision::Commit
                } else {
                    Decision::Undecided
                }
            }
            DeciderPolicy::Threshold { k, of } => {
                let firsts = first_per_type(votes, of);
                let approvals = firsts
                    .values()
                    .filter(|v| v.verdict == Verdict::Approve)
                    .count();
                let outstanding = of.len() - firsts.len();
                if approvals >= *k {
                    Decision::Commit
                } else if approvals + outstanding < *k {
                    Decision::Abort(format!(
                        "threshold: {approvals} of {k} approvals reachable ({})",
                        rejections(&firsts)
                    ))
                } else {
                    Decision::Undecided
                }
            }
        }
    }

    pub fn to_json(&self) -> Value {
        let mut doc = json!({"v": SCHEMA_VERSION, "kind": "decider", "expr": self.name()});
        match self {
            DeciderPolicy::OnByDefault | DeciderPolicy::FirstVoter => {}
            DeciderPolicy::Or(t) | DeciderPolicy::And(t) => doc["types"] = json!(t),
            DeciderPolicy::Threshold { k, of } => {
                doc["k"] = json!(k);
                doc["types"] = json!(of);
            }
        }
        doc
    }
}

impl fmt::Display for DeciderPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeciderPolicy::OnByDefault | DeciderPolicy::FirstVoter => f.write_str(self.name()),
            DeciderPolicy::Or(t) | DeciderPolicy::And(t) => {
                write!(f, "{}({})", self.name(), t.join(","))
            }
            DeciderPolicy::Threshold { k, of } => write!(f, "threshold({k}; {})", of.join(",")),
        }
    }
}

impl serde::Serialize for DeciderPolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

impl<'de> serde::Deserialize<'de> for DeciderPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let mut value = Value::deserialize(d)?;
        // Config files may omit the kind when the context makes it obvious.
        if let Some(obj) = value.as_object_mut() {
            obj.entry("kind").or_insert_with(|| json!("decider"));
        }
        match parse_policy_value(&value).map_err(serde::de::Error::custom)? {
            PolicyDocument::Decider(p) => Ok(p),
            other => Err(serde::de::Error::custom(format!(
                "expected a decider policy, found {:?}",
                other.kind()
            ))),
        }
    }
}

fn first_per_type<'a>(votes: &'a [VoteBody], types: &[String]) -> BTreeMap<&'a str, &'a VoteBody> {
    let mut out = BTreeMap::new();
    for v in votes {
        if types.contains(&v.voter_type) {
            out.entry(v.voter_type.as_str()).or_insert(v);
        }
    }
    out
}

fn rejections(firsts: &BTreeMap<&str, &VoteBody>) -> String {
    firsts
        .values()
        .filter(|v| v.verdict == Verdict::Reject)
        .map(|v| format!("{}/{}: {}", v.voter_type, v.voter_id, v.rationale))
        .collect::<Vec<_>>()
        .join("; ")
}

impl VoterPolicy {
    pub fn to_json(&self) -> Value {
        json!({
            "v": SCHEMA_VERSION,
            "kind": "voter",
            "target": self.target_voter_type,
            "body": self.body,
        })
    }
}

impl DriverElection {
    pub fn to_json(&self) -> Value {
        json!({
            "v": SCHEMA_VERSION,
            "kind": "driver_election",
            "epoch": self.epoch,
            "candidate": self.candidate,
        })
    }
}

impl PolicyDocument {
    pub fn kind(&self) -> PolicyKind {
        match self {
            PolicyDocument::Decider(_) => PolicyKind::Decider,
            PolicyDocument::Voter(_) => PolicyKind::Voter,
            PolicyDocument::DriverElection(_) => PolicyKind::DriverElection,
        }
    }

    pub fn to_json(&self) -> Value {
        match self {
            PolicyDocument::Decider(p) => p.to_json(),
            PolicyDocument::Voter(p) => p.to_json(),
            PolicyDocument::DriverElection(p) => p.to_json(),
        }
    }

    /// The entry payload carrying this document.
    pub fn to_payload(&self, issuer: impl Into<String>) -> agentbus::Payload {
        agentbus::Payload::policy(self.kind(), issuer, self.to_json())
    }
}

/// Parses a policy document from its text form.
pub fn parse_policy(text: &str) -> Result<PolicyDocument, MalformedPolicy> {
    let value: Value = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
    parse_policy_value(&value)
}

pub fn parse_policy_value(value: &Value) -> Result<PolicyDocument, MalformedPolicy> {
    let obj = value
        .as_object()
        .ok_or_else(|| malformed("document must be an object"))?;
    match obj.get("v") {
        None => {}
        Some(v) if v.as_u64() == Some(SCHEMA_VERSION) => {}
        Some(v) => return Err(malformed(format!("unsupported schema version {v}"))),
    }
    let kind = str_field(obj, "kind")?;
    let allowed: &[&str] = match kind {
        "decider" => &["v", "kind", "expr", "types", "k"],
        "voter" => &["v", "kind", "target", "body"],
        "driver_election" => &["v", "kind", "epoch", "candidate"],
        other => return Err(malformed(format!("unknown policy kind `{other}`"))),
    };
    if let Some(extra) = obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(malformed(format!("unexpected field `{extra}` for kind `{kind}`")));
    }
    match kind {
        "decider" => parse_decider(obj).map(PolicyDocument::Decider),
        "voter" => {
            let target = str_field(obj, "target")?.trim();
            if target.is_empty() {
                return Err(malformed("voter policy needs a non-empty target"));
            }
            let body = obj.get("body").cloned().unwrap_or(Value::Object(Map::new()));
            Ok(PolicyDocument::Voter(VoterPolicy {
                target_voter_type: target.to_string(),
                body,
            }))
        }
        _ => {
            let epoch = obj
                .get("epoch")
                .and_then(Value::as_u64)
                .ok_or_else(|| malformed("`epoch` must be a non-negative integer"))?;
            let candidate = str_field(obj, "candidate")?;
            if candidate.is_empty() {
                return Err(malformed("election needs a candidate"));
            }
            Ok(PolicyDocument::DriverElection(DriverElection {
                epoch,
                candidate: candidate.to_string(),
            }))
        }
    }
}

fn str_field<'a>(obj: &'a Map<String, Value>, key: &str) -> Result<&'a str, MalformedPolicy> {
    obj.get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| malformed(format!("missing string field `{key}`")))
}

fn parse_decider(obj: &Map<String, Value>) -> Result<DeciderPolicy, MalformedPolicy> {
    let types = || -> Result<Vec<String>, MalformedPolicy> {
        let arr = obj
            .get("types")
            .and_then(Value::as_array)
            .ok_or_else(|| malformed("missing `types` list"))?;
        arr.iter()
            .map(|t| {
                t.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| malformed("voter types must be strings"))
            })
            .collect()
    };
    let expr = str_field(obj, "expr")?;
    let takes_types = matches!(expr, "or" | "boolean_or" | "and" | "boolean_and" | "threshold");
    if !takes_types && obj.contains_key("types") {
        return Err(malformed(format!("`{expr}` takes no voter types")));
    }
    if expr != "threshold" && obj.contains_key("k") {
        return Err(malformed("`k` only applies to threshold"));
    }
    let policy = match expr {
        "on_by_default" => DeciderPolicy::OnByDefault,
        "first_voter" => DeciderPolicy::FirstVoter,
        "or" | "boolean_or" => DeciderPolicy::Or(types()?),
        "and" | "boolean_and" => DeciderPolicy::And(types()?),
        "threshold" => {
            let k = obj
                .get("k")
                .and_then(Value::as_u64)
                .ok_or_else(|| malformed("threshold needs integer `k`"))?;
            DeciderPolicy::Threshold {
                k: k as usize,
                of: types()?,
            }
        }
        other => return Err(malformed(format!("unknown decider expression `{other}`"))),
    };
    policy.validate()?;
    Ok(policy)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vote(ty: &str, verdict: Verdict) -> VoteBody {
        VoteBody {
            intent_position: 1,
            voter_type: ty.into(),
            voter_id: format!("{ty}-1"),
            verdict,
            rationale: "r".into(),
        }
    }
    use Verdict::{Approve as A, Reject as R};

    fn kind(d: &Decision) -> &'static str {
        match d {
            Decision::Commit => "commit",
            Decision::Abort(_) => "abort",
            Decision::Undecided => "undecided",
        }
    }

    #[test]
    fn on_by_default_commits_without_votes() {
        assert_eq!(DeciderPolicy::OnByDefault.evaluate(&[]), Decision::Commit);
        assert_eq!(
            DeciderPolicy::OnByDefault.evaluate(&[vote("rule", R)]),
            Decision::Commit
        );
    }

    #[test]
    fn first_voter_follows_the_earliest_vote() {
        let p = DeciderPolicy::FirstVoter;
        assert_eq!(p.evaluate(&[]), Decision::Undecided);
        assert_eq!(kind(&p.evaluate(&[vote("rule", R), vote("llm", A)])), "abort");
        assert_eq!(p.evaluate(&[vote("llm", A), vote("rule", R)]), Decision::Commit);
    }

    #[test]
    fn or_override() {
        let p = DeciderPolicy::or(["rule", "llm"]);
        assert_eq!(p.evaluate(&[vote("rule", R)]), Decision::Undecided);
        assert_eq!(p.evaluate(&[vote("rule", R), vote("llm", A)]), Decision::Commit);
        assert_eq!(kind(&p.evaluate(&[vote("rule", R), vote("llm", R)])), "abort");
    }

    #[test]
    fn and_short_circuits_on_reject() {
        let p = DeciderPolicy::and(["rule", "llm"]);
        assert_eq!(kind(&p.evaluate(&[vote("llm", R)])), "abort");
        assert_eq!(p.evaluate(&[vote("rule", A)]), Decision::Undecided);
        assert_eq!(p.evaluate(&[vote("rule", A), vote("llm", A)]), Decision::Commit);
    }

    #[test]
    fn only_first_vote_per_type_counts() {
        let p = DeciderPolicy::or(["rule"]);
        assert_eq!(kind(&p.evaluate(&[vote("rule", R), vote("rule", A)])), "abort");
    }

    #[test]
    fn unlisted_types_are_ignored() {
        let p = DeciderPolicy::and(["rule"]);
        assert_eq!(p.evaluate(&[vote("other", R)]), Decision::Undecided);
    }

    /// Brute force: a decision is final once every completion of the
    /// outstanding votes agrees on it.
    fn threshold_oracle(k: usize, cast: &[Option<Verdict>]) -> &'static str {
        let open: Vec<usize> = (0..cast.len()).filter(|i| cast[*i].is_none()).collect();
        let mut outcomes = std::collections::BTreeSet::new();
        for mask in 0..(1u32 << open.len()) {
            let mut full: Vec<Verdict> = cast.iter().map(|v| v.unwrap_or(R)).collect();
            for (bit, idx) in open.iter().enumerate() {
                full[*idx] = if mask & (1 << bit) != 0 { A } else { R };
            }
            let approvals = full.iter().filter(|v| **v == A).count();
            outcomes.insert(approvals >= k);
        }
        match (outcomes.contains(&true), outcomes.contains(&false)) {
            (true, false) => "commit",
            (false, true) => "abort",
            _ => "undecided",
        }
    }

    #[test]
    fn threshold_two_of_three_all_27_assignments() {
        let types = ["a", "b", "c"];
        let p = DeciderPolicy::threshold(2, types);
        let states = [None, Some(A), Some(R)];
        let mut seen = 0;
        for x in states {
            for y in states {
                for z in states {
                    let cast = [x, y, z];
                    let votes: Vec<VoteBody> = types
                        .iter()
                        .zip(cast)
                        .filter_map(|(t, v)| v.map(|v| vote(t, v)))
                        .collect();
                    assert_eq!(
                        kind(&p.evaluate(&votes)),
                        threshold_oracle(2, &cast),
                        "{cast:?}"
                    );
                    seen += 1;
                }
            }
        }
        assert_eq!(seen, 27);
        let decisive = [vote("a", A), vote("b", R), vote("c", R)];
        assert_eq!(kind(&p.evaluate(&decisive)), "abort");
    }

    #[test]
    fn parse_examples() {
        assert_eq!(
            parse_policy(r#"{"kind":"decider","expr":"first_voter"}"#).unwrap(),
            PolicyDocument::Decider(DeciderPolicy::FirstVoter)
        );
        assert_eq!(
            parse_policy(r#"{"kind":"decider","expr":"or","types":["rule","llm"]}"#).unwrap(),
            PolicyDocument::Decider(DeciderPolicy::or(["rule", "llm"]))
        );
        assert_eq!(
            parse_policy(r#"{"v":1,"kind":"decider","expr":"boolean_and","types":["x"]}"#).unwrap(),
            PolicyDocument::Decider(DeciderPolicy::and(["x"]))
        );
        assert!(parse_policy(r#"{"kind":"decider","expr":"fir"#).is_err());
    }

    #[test]
    fn parse_rejects_bad_documents() {
        for doc in [
            r#"[]"#,
            r#"{"kind":"decider"}"#,
            r#"{"kind":"decider","expr":"or","types":[]}"#,
            r#"{"kind":"decider","expr":"or","types":["a","a"]}"#,
            r#"{"kind":"decider","expr":"threshold","k":3,"types":["a","b"]}"#,
            r#"{"kind":"decider","expr":"threshold","k":0,"types":["a"]}"#,
            r#"{"kind":"decider","expr":"first_voter","types":["a"]}"#,
            r#"{"kind":"decider","expr":"nope"}"#,
            r#"{"v":2,"kind":"decider","expr":"first_voter"}"#,
            r#"{"kind":"voter","target":""}"#,
            r#"{"kind":"driver_election","epoch":-1,"candidate":"d"}"#,
            r#"{"kind":"elsewhere"}"#,
            r#"{"kind":"decider","expr":"first_voter","extra":1}"#,
        ] {
            assert!(parse_policy(doc).is_err(), "{doc}");
        }
    }

    #[test]
    fn voter_and_election_documents() {
        let v = parse_policy(r#"{"kind":"voter","target":"rule","body":{"prepend":[]}}"#).unwrap();
        assert_eq!(v.kind(), PolicyKind::Voter);
        let e = parse_policy(r#"{"kind":"driver_election","epoch":4,"candidate":"d2"}"#).unwrap();
        assert_eq!(
            e,
            PolicyDocument::DriverElection(DriverElection {
                epoch: 4,
                candidate: "d2".into()
            })
        );
        assert_eq!(parse_policy_value(&e.to_json()).unwrap(), e);
    }

    fn all_policies() -> Vec<DeciderPolicy> {
        let types = ["a", "b", "c"];
        let mut out = vec![DeciderPolicy::OnByDefault, DeciderPolicy::FirstVoter];
        for mask in 1u8..8 {
            let of: Vec<String> = (0..3)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| types[i].to_string())
                .collect();
            out.push(DeciderPolicy::Or(of.clone()));
            out.push(DeciderPolicy::And(of.clone()));
            for k in 1..=of.len() {
                out.push(DeciderPolicy::Threshold { k, of: of.clone() });
            }
        }
        out
    }

    #[test]
    fn monotone_over_every_short_vote_sequence() {
        let options: Vec<VoteBody> = ["a", "b", "c"]
            .iter()
            .flat_map(|t| [vote(t, A), vote(t, R)])
            .collect();
        let mut seqs: Vec<Vec<VoteBody>> = vec![vec![]];
        for _ in 0..4 {
            let next: Vec<Vec<VoteBody>> = seqs
                .iter()
                .filter(|s| s.len() == seqs.last().unwrap().len())
                .flat_map(|s| {
                    options.iter().map(move |o| {
                        let mut s = s.clone();
                        s.push(o.clone());
                        s
                    })
                })
                .collect();
            seqs.extend(next);
        }
        for p in all_policies() {
            for seq in &seqs {
                let mut settled = None;
                for n in 0..=seq.len() {
                    let d = kind(&p.evaluate(&seq[..n]));
                    match settled {
                        Some(s) => assert_eq!(s, d, "{p} {seq:?}"),
                        None if d != "undecided" => settled = Some(d),
                        None => {}
                    }
                }
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        const TYPES: [&str; 3] = ["a", "b", "c"];

        fn policy() -> impl Strategy<Value = DeciderPolicy> {
            let subset = proptest::sample::subsequence(TYPES.to_vec(), 1..=3)
                .prop_map(|v| v.into_iter().map(String::from).collect::<Vec<_>>());
            prop_oneof![
                Just(DeciderPolicy::OnByDefault),
                Just(DeciderPolicy::FirstVoter),
                subset.clone().prop_map(DeciderPolicy::Or),
                subset.clone().prop_map(DeciderPolicy::And),
                subset.prop_flat_map(|of| {
                    (1..=of.len()).prop_map(move |k| DeciderPolicy::Threshold { k, of: of.clone() })
                }),
            ]
        }

        fn votes() -> impl Strategy<Value = Vec<VoteBody>> {
            proptest::collection::vec(
                (proptest::sample::select(TYPES.to_vec()), any::<bool>()),
                0..7,
            )
            .prop_map(|vs| {
                vs.into_iter()
                    .map(|(t, ok)| vote(t, if ok { A } else { R }))
                    .collect()
            })
        }

        proptest! {
            #[test]
            fn evaluation_is_monotone(p in policy(), vs in votes()) {
                let mut settled: Option<&'static str> = None;
                for n in 0..=vs.len() {
                    let d = kind(&p.evaluate(&vs[..n]));
                    if let Some(s) = settled {
                        prop_assert_eq!(s, d);
                    } else if d != "undecided" {
                        settled = Some(d);
                    }
                }
            }

            #[test]
            fn order_free_policies_ignore_interleaving(
                p in policy(),
                vs in votes(),
                seed in any::<u64>(),
            ) {
                prop_assume!(p != DeciderPolicy::FirstVoter);
                // Keep one vote per type so the multiset is order independent.
                let mut uniq: Vec<VoteBody> = Vec::new();
                for v in vs {
                    if !uniq.iter().any(|u| u.voter_type == v.voter_type) {
                        uniq.push(v);
                    }
                }
                let mut shuffled = uniq.clone();
                let n = shuffled.len();
                let mut s = seed;
                for i in (1..n).rev() {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    shuffled.swap(i, (s >> 33) as usize % (i + 1));
                }
                prop_assert_eq!(kind(&p.evaluate(&uniq)), kind(&p.evaluate(&shuffled)));
            }

            #[test]
            fn parse_serialize_round_trip(p in policy()) {
                let doc = PolicyDocument::Decider(p);
                let text = doc.to_json().to_string();
                prop_assert_eq!(parse_policy(&text).unwrap(), doc);
            }
        }
    }
}
