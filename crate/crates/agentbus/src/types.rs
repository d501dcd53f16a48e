use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::BusError;
use crate::Position;

/// The nine entry kinds that can appear on a bus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PayloadType {
    InfIn,
    InfOut,
    Intent,
    Vote,
    Commit,
    Abort,
    Result,
    Mail,
    Policy,
}

impl PayloadType {
    pub const ALL: [PayloadType; 9] = [
        PayloadType::InfIn,
        PayloadType::InfOut,
        PayloadType::Intent,
        PayloadType::Vote,
        PayloadType::Commit,
        PayloadType::Abort,
        PayloadType::Result,
        PayloadType::Mail,
        PayloadType::Policy,
    ];

    /// Stable name used in every text encoding.
    pub fn as_str(self) -> &'static str {
        match self {
            PayloadType::InfIn => "InfIn",
            PayloadType::InfOut => "InfOut",
            PayloadType::Intent => "Intent",
            PayloadType::Vote => "Vote",
            PayloadType::Commit => "Commit",
            PayloadType::Abort => "Abort",
            PayloadType::Result => "Result",
            PayloadType::Mail => "Mail",
            PayloadType::Policy => "Policy",
        }
    }

    /// On-disk type tag.
    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }
}

impl fmt::Display for PayloadType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PayloadType {
    type Err = BusError;

    /// Case-insensitive; accepts `inf_in` / `inf-in` spellings as well.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .chars()
            .filter(|c| *c != '_' && *c != '-')
            .flat_map(char::to_lowercase)
            .collect();
        PayloadType::ALL
            .into_iter()
            .find(|t| t.as_str().to_lowercase() == norm)
            .ok_or_else(|| BusError::UnknownType(s.to_string()))
    }
}

/// A set of payload types, stored as a bitmask.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct TypeSet(u16);

impl TypeSet {
    pub const fn empty() -> Self {
        TypeSet(0)
    }

    pub const fn all() -> Self {
        TypeSet(0x1ff)
    }

    pub fn of(types: &[PayloadType]) -> Self {
        types.iter().copied().collect()
    }

    pub fn contains(self, t: PayloadType) -> bool {
        self.0 & (1 << t.tag()) != 0
    }

    pub fn insert(&mut self, t: PayloadType) {
        self.0 |= 1 << t.tag();
    }

    pub fn remove(&mut self, t: PayloadType) {
        self.0 &= !(1 << t.tag());
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset(self, other: TypeSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn union(self, other: TypeSet) -> TypeSet {
        TypeSet(self.0 | other.0)
    }

    pub fn difference(self, other: TypeSet) -> TypeSet {
        TypeSet(self.0 & !other.0)
    }

    pub fn iter(self) -> impl Iterator<Item = PayloadType> {
        PayloadType::ALL.into_iter().filter(move |t| self.contains(*t))
    }

    pub fn bits(self) -> u16 {
        self.0
    }

    pub fn from_bits(bits: u16) -> Self {
        TypeSet(bits & 0x1ff)
    }
}

impl FromIterator<PayloadType> for TypeSet {
    fn from_iter<I: IntoIterator<Item = PayloadType>>(iter: I) -> Self {
        let mut set = TypeSet::empty();
        for t in iter {
            set.insert(t);
        }
        set
    }
}

impl fmt::Debug for TypeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

impl Serialize for TypeSet {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for TypeSet {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let names: Vec<String> = Vec::deserialize(deserializer)?;
        names
            .iter()
            .map(|n| n.parse::<PayloadType>().map_err(serde::de::Error::custom))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageRole {
    System,
    User,
    Assistant,
    Tool,
}

/// One role-tagged message of an inference conversation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: MessageRole,
    pub content: String,
}

impl Message {
    pub fn new(role: MessageRole, content: impl Into<String>) -> Self {
        Message {
            role,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::new(MessageRole::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(MessageRole::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(MessageRole::Assistant, content)
    }

    pub fn tool(content: impl Into<String>) -> Self {
        Self::new(MessageRole::Tool, content)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionKind {
    Shell,
    Builtin,
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActionKind::Shell => "shell",
            ActionKind::Builtin => "builtin",
        })
    }
}

/// A concrete action proposed by the driver and run by the executor.
///
/// `workdir` is relative to the executor's sandbox root.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionSpec {
    pub kind: ActionKind,
    pub body: String,
    pub workdir: String,
}

impl ActionSpec {
    pub fn shell(body: impl Into<String>) -> Self {
        ActionSpec {
            kind: ActionKind::Shell,
            body: body.into(),
            workdir: ".".into(),
        }
    }

    pub fn builtin(body: impl Into<String>) -> Self {
        ActionSpec {
            kind: ActionKind::Builtin,
            body: body.into(),
            workdir: ".".into(),
        }
    }

    pub fn with_workdir(mut self, workdir: impl Into<String>) -> Self {
        self.workdir = workdir.into();
        self
    }

    pub fn is_valid(&self) -> bool {
        !self.body.trim().is_empty()
    }
}

impl fmt::Display for ActionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.body)?;
        if self.workdir != "." {
            write!(f, " (in {})", self.workdir)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Approve,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResultStatus {
    Ok,
    Error,
    /// Appended by a rebooting executor; fences every earlier commit.
    Recovery,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Decider,
    Voter,
    DriverElection,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfInBody {
    /// Messages added to the conversation since the previous InfIn.
    pub delta: Vec<Message>,
    pub driver_epoch: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfOutBody {
    pub text: String,
    pub intent_extracted: bool,
    pub driver_epoch: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentBody {
    pub action: ActionSpec,
    pub driver_epoch: u64,
    pub turn: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteBody {
    pub intent_position: Position,
    pub voter_type: String,
    pub voter_id: String,
    pub verdict: Verdict,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitBody {
    pub intent_position: Position,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbortBody {
    pub intent_position: Position,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultBody {
    pub intent_position: Option<Position>,
    pub status: ResultStatus,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MailBody {
    pub sender: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyBody {
    pub kind: PolicyKind,
    pub issuer: String,
    /// The policy document; interpreted by the components that play it.
    pub body: serde_json::Value,
}

/// A typed entry body. Serializes as `{"type": <name>, "body": {...}}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "body")]
pub enum Payload {
    InfIn(InfInBody),
    InfOut(InfOutBody),
    Intent(IntentBody),
    Vote(VoteBody),
    Commit(CommitBody),
    Abort(AbortBody),
    Result(ResultBody),
    Mail(MailBody),
    Policy(PolicyBody),
}

impl Payload {
    pub fn payload_type(&self) -> PayloadType {
        match self {
            Payload::InfIn(_) => PayloadType::InfIn,
            Payload::InfOut(_) => PayloadType::InfOut,
            Payload::Intent(_) => PayloadType::Intent,
            Payload::Vote(_) => PayloadType::Vote,
            Payload::Commit(_) => PayloadType::Commit,
            Payload::Abort(_) => PayloadType::Abort,
            Payload::Result(_) => PayloadType::Result,
            Payload::Mail(_) => PayloadType::Mail,
            Payload::Policy(_) => PayloadType::Policy,
        }
    }

    /// Encodes the body document alone (the type travels separately).
    pub fn encode_body(&self) -> Vec<u8> {
        let res = match self {
            Payload::InfIn(b) => serde_json::to_vec(b),
            Payload::InfOut(b) => serde_json::to_vec(b),
            Payload::Intent(b) => serde_json::to_vec(b),
            Payload::Vote(b) => serde_json::to_vec(b),
            Payload::Commit(b) => serde_json::to_vec(b),
            Payload::Abort(b) => serde_json::to_vec(b),
            Payload::Result(b) => serde_json::to_vec(b),
            Payload::Mail(b) => serde_json::to_vec(b),
            Payload::Policy(b) => serde_json::to_vec(b),
        };
        // Bodies are plain structs of strings, integers and JSON values.
        res.expect("payload bodies always serialize")
    }

    pub fn decode_body(ty: PayloadType, bytes: &[u8]) -> Result<Payload, serde_json::Error> {
        Ok(match ty {
            PayloadType::InfIn => Payload::InfIn(serde_json::from_slice(bytes)?),
            PayloadType::InfOut => Payload::InfOut(serde_json::from_slice(bytes)?),
            PayloadType::Intent => Payload::Intent(serde_json::from_slice(bytes)?),
            PayloadType::Vote => Payload::Vote(serde_json::from_slice(bytes)?),
            PayloadType::Commit => Payload::Commit(serde_json::from_slice(bytes)?),
            PayloadType::Abort => Payload::Abort(serde_json::from_slice(bytes)?),
            PayloadType::Result => Payload::Result(serde_json::from_slice(bytes)?),
            PayloadType::Mail => Payload::Mail(serde_json::from_slice(bytes)?),
            PayloadType::Policy => Payload::Policy(serde_json::from_slice(bytes)?),
        })
    }

    /// The intent this entry refers to, for votes, decisions and results.
    pub fn intent_ref(&self) -> Option<Position> {
        match self {
            Payload::Vote(v) => Some(v.intent_position),
            Payload::Commit(c) => Some(c.intent_position),
            Payload::Abort(a) => Some(a.intent_position),
            Payload::Result(r) => r.intent_position,
            _ => None,
        }
    }

    pub fn mail(sender: impl Into<String>, body: impl Into<String>) -> Self {
        Payload::Mail(MailBody {
            sender: sender.into(),
            body: body.into(),
        })
    }

    pub fn commit(intent_position: Position) -> Self {
        Payload::Commit(CommitBody { intent_position })
    }

    pub fn abort(intent_position: Position, reason: impl Into<String>) -> Self {
        Payload::Abort(AbortBody {
            intent_position,
            reason: reason.into(),
        })
    }

    pub fn intent(action: ActionSpec, driver_epoch: u64, turn: u64) -> Self {
        Payload::Intent(IntentBody {
            action,
            driver_epoch,
            turn,
        })
    }

    pub fn result(
        intent_position: Option<Position>,
        status: ResultStatus,
        output: impl Into<String>,
    ) -> Self {
        Payload::Result(ResultBody {
            intent_position,
            status,
            output: output.into(),
        })
    }

    pub fn policy(kind: PolicyKind, issuer: impl Into<String>, body: serde_json::Value) -> Self {
        Payload::Policy(PolicyBody {
            kind,
            issuer: issuer.into(),
            body,
        })
    }

    /// One-line human readable rendering, used by audit tools.
    pub fn summary(&self) -> String {
        match self {
            Payload::InfIn(b) => {
                let bytes: usize = b.delta.iter().map(|m| m.content.len()).sum();
                format!(
                    "epoch={} +{} msg(s), {} bytes: {}",
                    b.driver_epoch,
                    b.delta.len(),
                    bytes,
                    b.delta
                        .last()
                        .map(|m| m.content.as_str())
                        .unwrap_or_default()
                )
            }
            Payload::InfOut(b) => format!(
                "epoch={} action={} {}",
                b.driver_epoch, b.intent_extracted, b.text
            ),
            Payload::Intent(b) => {
                format!("epoch={} turn={} {}", b.driver_epoch, b.turn, b.action)
            }
            Payload::Vote(b) => format!(
                "@{} {}/{} {:?}: {}",
                b.intent_position, b.voter_type, b.voter_id, b.verdict, b.rationale
            ),
            Payload::Commit(b) => format!("@{}", b.intent_position),
            Payload::Abort(b) => format!("@{} {}", b.intent_position, b.reason),
            Payload::Result(b) => match b.intent_position {
                Some(p) => format!("@{} {:?} {}", p, b.status, b.output),
                None => format!("{:?} {}", b.status, b.output),
            },
            Payload::Mail(b) => format!("from {}: {}", b.sender, b.body),
            Payload::Policy(b) => format!("{:?} by {}: {}", b.kind, b.issuer, b.body),
        }
    }
}
