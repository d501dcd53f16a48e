//! Scenario files.
//!
//! A scenario is one JSON document: the components to run, the scripted
//! inference behind the driver, a workload of mail and policy injections,
//! faults, and the oracles checked once the run is over.
//!
//! Triggers decide when workload items and faults fire:
//!
//! | trigger | fires when |
//! |---|---|
//! | `{"appends": n}` | the bus holds at least n entries |
//! | `{"time_ms": t}` | the clock reads at least t |
//! | `"idle"` | nothing else can make progress; idle items fire one at a time |
//! | `{"client_appends": {"target": c, "count": n}}` | right after component c's n-th own append (kill only) |
//! | `{"side_effects": n}` | just before the executor's (n+1)-th side effect (kill only) |

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{DeciderConfig, VoterConfig};
use crate::inference::ScriptRules;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Memory,
    Durable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverSpec {
    #[serde(default)]
    pub system_prompt: String,
    /// Scripted inference; `delay_ms` models inference latency.
    pub rules: ScriptRules,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoterSpec {
    pub id: String,
    #[serde(flatten)]
    pub config: VoterConfig,
    /// When false the voter only starts on a `restart` fault.
    #[serde(default = "yes")]
    pub autostart: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutorSpec {
    #[serde(default = "default_action_timeout_ms")]
    pub action_timeout_ms: u64,
}

impl Default for ExecutorSpec {
    fn default() -> Self {
        ExecutorSpec {
            action_timeout_ms: default_action_timeout_ms(),
        }
    }
}

fn default_action_timeout_ms() -> u64 {
    60_000
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    Appends(u64),
    TimeMs(u64),
    Idle,
    ClientAppends { target: String, count: u64 },
    SideEffects(u64),
}

impl Trigger {
    /// Triggers armed up front rather than polled by the loop.
    pub fn is_armed(&self) -> bool {
        matches!(self, Trigger::ClientAppends { .. } | Trigger::SideEffects(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadAction {
    Mail {
        #[serde(default = "default_sender")]
        sender: String,
        body: String,
    },
    /// A policy document, appended by the admin client.
    Policy(Value),
    /// A fault fired in workload order, typically to start or stop a
    /// component between batches of mail.
    Fault { target: String, kind: FaultKind },
    /// The admin appends a second Commit for the latest committed intent.
    RepeatCommit,
    /// A client with the executor's identity tries to append a Vote, Commit,
    /// Abort and Policy for the latest intent. Each must be refused.
    Forge,
}

fn default_sender() -> String {
    "user".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadItem {
    pub at: Trigger,
    #[serde(flatten)]
    pub action: WorkloadAction,
}

impl WorkloadItem {
    pub fn mail(at: Trigger, body: impl Into<String>) -> Self {
        WorkloadItem {
            at,
            action: WorkloadAction::Mail {
                sender: default_sender(),
                body: body.into(),
            },
        }
    }

    pub fn fault(at: Trigger, target: impl Into<String>, kind: FaultKind) -> Self {
        WorkloadItem {
            at,
            action: WorkloadAction::Fault {
                target: target.into(),
                kind,
            },
        }
    }

    pub fn policy(at: Trigger, doc: Value) -> Self {
        WorkloadItem {
            at,
            action: WorkloadAction::Policy(doc),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    /// Stop the component abruptly; it stays down until a `restart`.
    Kill,
    /// Kill, then restart through the recovery path as soon as the death
    /// is noticed.
    Crash,
    Pause,
    Resume,
    /// Start a fresh instance (recovering from the log) if none is running.
    Restart,
    /// Elect a new driver just before the target driver's next intent, so
    /// that intent lands stale.
    Usurp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fault {
    pub at: Trigger,
    pub target: String,
    pub kind: FaultKind,
}

impl Fault {
    pub fn new(at: Trigger, target: impl Into<String>, kind: FaultKind) -> Self {
        Fault {
            at,
            target: target.into(),
            kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "oracle", rename_all = "snake_case")]
pub enum Oracle {
    /// The run reached quiescence with the driver idle and nothing in flight.
    Completed,
    /// Some successful result's output contains `text`.
    ResultContains { text: String },
    /// The sandbox file holds exactly `item-from` ..= `item-to`, each once.
    FileItems { path: String, from: u64, to: u64 },
    /// Exactly one driver instance is alive and holds the current epoch.
    SingleLiveEpoch,
    /// After the last executor recovery, the first intent contains
    /// `introspect` and comes before any intent containing `work`.
    IntrospectionFirst { introspect: String, work: String },
}

impl Oracle {
    pub fn name(&self) -> String {
        match self {
            Oracle::Completed => "completed".into(),
            Oracle::ResultContains { text } => format!("result_contains({text})"),
            Oracle::FileItems { path, from, to } => format!("file_items({path}, {from}..={to})"),
            Oracle::SingleLiveEpoch => "single_live_epoch".into(),
            Oracle::IntrospectionFirst { introspect, work } => {
                format!("introspection_first({introspect} before {work})")
            }
        }
    }
}

fn default_max_rounds() -> u64 {
    20_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub backend: BackendKind,
    /// Use the system clock instead of virtual time.
    #[serde(default)]
    pub realtime: bool,
    pub driver: DriverSpec,
    #[serde(default)]
    pub voters: Vec<VoterSpec>,
    #[serde(default)]
    pub decider: DeciderConfig,
    #[serde(default)]
    pub executor: ExecutorSpec,
    /// Snapshot every n entries played; off when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_every: Option<u64>,
    #[serde(default)]
    pub workload: Vec<WorkloadItem>,
    #[serde(default)]
    pub faults: Vec<Fault>,
    #[serde(default)]
    pub oracles: Vec<Oracle>,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("malformed scenario: {0}")]
    Malformed(String),
}

impl Scenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError::Malformed(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Names that faults may target.
    pub fn component_names(&self) -> Vec<String> {
        let mut names = vec!["driver".to_string(), "decider".to_string(), "executor".to_string()];
        names.extend(self.voters.iter().map(|v| v.id.clone()));
        names
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Malformed(m));
        let names = self.component_names();
        let mut seen = std::collections::BTreeSet::new();
        for n in &names {
            if !seen.insert(n) {
                return bad(format!("component `{n}` declared twice"));
            }
        }
        for f in &self.faults {
            if !names.contains(&f.target) {
                return bad(format!("fault targets unknown component `{}`", f.target));
            }
            if f.at.is_armed() && !matches!(f.kind, FaultKind::Kill | FaultKind::Crash) {
                return bad(format!("{:?} trigger only supports kill and crash", f.at));
            }
            if let Trigger::ClientAppends { target, .. } = &f.at {
                if target != &f.target {
                    return bad("client_appends target must match the fault target".into());
                }
            }
            if matches!(f.at, Trigger::SideEffects(_)) && f.target != "executor" {
                return bad("side_effects triggers only apply to the executor".into());
            }
            if f.kind == FaultKind::Usurp && f.target != "driver" {
                return bad("only the driver can be usurped".into());
            }
        }
        for w in &self.workload {
            if w.at.is_armed() {
                return bad("workload items cannot use armed triggers".into());
            }
            match &w.action {
                WorkloadAction::Policy(doc) => {
                    crate::policy::parse_policy_value(doc).map_err(|e| ScenarioError::Malformed(e.to_string()))?;
                }
                WorkloadAction::Fault { target, kind } => {
                    if !names.contains(target) {
                        return bad(format!("workload fault targets unknown component `{target}`"));
                    }
                    if *kind == FaultKind::Usurp && target != "driver" {
                        return bad("only the driver can be usurped".into());
                    }
                }
                WorkloadAction::Mail { .. } | WorkloadAction::RepeatCommit | WorkloadAction::Forge => {}
            }
        }
        Ok(())
    }
}
