//! Inference-backed voting.
//!
//! The voter shows the model the proposed action, the request that led to it
//! and the votes already cast, and reads back `APPROVE` or `REJECT`. With
//! `consult` set it waits (up to `consult_wait_ms` after the intent was
//! logged) for votes of those types first, so it can act as an override for
//! a stricter voter.

use std::sync::Arc;

use agentbus::{Clock, Payload, Verdict};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Ballot, VoteBehavior, VoteContext, VoterError};
use crate::inference::{AdapterConfig, InferenceAdapter};

fn default_consult_wait() -> u64 {
    5_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmVoterConfig {
    pub adapter: AdapterConfig,
    #[serde(default)]
    pub prompt: String,
    #[serde(default)]
    pub consult: Vec<String>,
    #[serde(default = "default_consult_wait")]
    pub consult_wait_ms: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LlmPolicy {
    prompt: Option<String>,
    consult: Option<Vec<String>>,
}

pub struct LlmVoter {
    adapter: Arc<dyn InferenceAdapter>,
    prompt: String,
    consult: Vec<String>,
    consult_wait_ms: u64,
}

impl LlmVoter {
    pub fn new(config: &LlmVoterConfig, clock: Arc<dyn Clock>) -> Result<Self, VoterError> {
        Ok(LlmVoter {
            adapter: config.adapter.build(clock)?,
            prompt: config.prompt.clone(),
            consult: config.consult.clone(),
            consult_wait_ms: config.consult_wait_ms,
        })
    }
}

/// The first APPROVE or REJECT in the reply decides.
fn parse_reply(text: &str) -> Option<Verdict> {
    let upper = text.to_ascii_uppercase();
    match (upper.find("APPROVE"), upper.find("REJECT")) {
        (Some(a), Some(r)) => Some(if a < r { Verdict::Approve } else { Verdict::Reject }),
        (Some(_), None) => Some(Verdict::Approve),
        (None, Some(_)) => Some(Verdict::Reject),
        (None, None) => None,
    }
}

impl VoteBehavior for LlmVoter {
    fn vote(&mut self, ctx: &VoteContext<'_>) -> Result<Ballot, VoterError> {
        let p = ctx.intent_position;
        let history = ctx.client.read_from(0)?;
        let votes: Vec<_> = history
            .iter()
            .filter_map(|e| match &e.payload {
                Payload::Vote(v) if v.intent_position == p => Some(v),
                _ => None,
            })
            .collect();
        let missing = self
            .consult
            .iter()
            .any(|t| !votes.iter().any(|v| &v.voter_type == t));
        let until = ctx.intent_ts + self.consult_wait_ms;
        if missing && ctx.now_ms < until {
            return Ok(Ballot::Defer { until_ms: until });
        }
        let request = history
            .iter()
            .filter(|e| e.position < p)
            .filter_map(|e| match &e.payload {
                Payload::Mail(m) => Some(m.body.as_str()),
                _ => None,
            })
            .next_back()
            .unwrap_or("(none)");
        let mut text = format!(
            "Proposed action (intent @{p}):\nkind: {}\nworkdir: {}\nbody: {}\n\nLatest request: {request}\n\nVotes so far:\n",
            ctx.action.kind, ctx.action.workdir, ctx.action.body
        );
        if votes.is_empty() {
            text.push_str("(none)\n");
        }
        for v in &votes {
            text.push_str(&format!(
                "- {}/{}: {:?} ({})\n",
                v.voter_type, v.voter_id, v.verdict, v.rationale
            ));
        }
        text.push_str("\nReply APPROVE or REJECT, then a reason.");
        let mut conv = Vec::new();
        if !self.prompt.is_empty() {
            conv.push(agentbus::Message::system(self.prompt.clone()));
        }
        conv.push(agentbus::Message::user(text));
        let reply = self.adapter.infer(&conv)?;
        let verdict = parse_reply(&reply)
            .ok_or_else(|| VoterError::Behavior(format!("unparseable reply: {reply}")))?;
        let rationale: String = reply.trim().chars().take(200).collect();
        Ok(Ballot::Cast { verdict, rationale })
    }

    fn apply_policy(&mut self, body: &Value) -> Result<(), VoterError> {
        let p: LlmPolicy =
            serde_json::from_value(body.clone()).map_err(|e| VoterError::Policy(e.to_string()))?;
        if let Some(prompt) = p.prompt {
            self.prompt = prompt;
        }
        if let Some(consult) = p.consult {
            self.consult = consult;
        }
        Ok(())
    }
}
