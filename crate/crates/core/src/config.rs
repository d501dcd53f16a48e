//! Component configuration files.
//!
//! One JSON document describes one component: which bus it attaches to, its
//! client id, and its role-specific settings.
//!
//! ```json
//! {
//!   "bus": "demo",
//!   "id": "rule-1",
//!   "role": "voter",
//!   "voter_type": "rule",
//!   "behavior": "rule",
//!   "rules": [{"pattern": {"regex": "rm\\s+-rf"}, "verdict": "reject"}]
//! }
//! ```
//!
//! `bus` is either a path to a bus file or a bus id under the kernel root.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use agentbus::{Clock, SyncMode};
use serde::{Deserialize, Serialize};

use crate::components::{
    BehaviorConfig, Component, ComponentContext, ComponentError, Decider, Driver, DriverSettings,
    Executor, Sandbox, Voter, DEFAULT_VOTE_TIMEOUT,
};
use crate::inference::AdapterConfig;
use crate::policy::DeciderPolicy;
use crate::roles::Role;

fn default_vote_timeout_ms() -> u64 {
    DEFAULT_VOTE_TIMEOUT.as_millis() as u64
}

fn default_action_timeout_ms() -> u64 {
    60_000
}

fn default_snapshot_every() -> u64 {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverConfig {
    #[serde(default = "default_adapter")]
    pub adapter: AdapterConfig,
    #[serde(default)]
    pub system_prompt: String,
    /// Read at startup; overrides `system_prompt`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_prompt_file: Option<PathBuf>,
}

fn default_adapter() -> AdapterConfig {
    AdapterConfig::Echo
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoterConfig {
    pub voter_type: String,
    #[serde(flatten)]
    pub behavior: BehaviorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeciderConfig {
    #[serde(default)]
    pub policy: DeciderPolicy,
    #[serde(default = "default_vote_timeout_ms")]
    pub timeout_ms: u64,
}

impl Default for DeciderConfig {
    fn default() -> Self {
        DeciderConfig {
            policy: DeciderPolicy::OnByDefault,
            timeout_ms: default_vote_timeout_ms(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutorConfig {
    pub sandbox: PathBuf,
    #[serde(default = "default_action_timeout_ms")]
    pub action_timeout_ms: u64,
}

/// Role-specific settings, tagged by `role`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum RoleConfig {
    Driver(DriverConfig),
    Voter(VoterConfig),
    Decider(DeciderConfig),
    Executor(ExecutorConfig),
}

impl RoleConfig {
    pub fn role(&self) -> Role {
        match self {
            RoleConfig::Driver(_) => Role::Driver,
            RoleConfig::Voter(_) => Role::Voter,
            RoleConfig::Decider(_) => Role::Decider,
            RoleConfig::Executor(_) => Role::Executor,
        }
    }

    /// Builds the component. Nothing is appended until its first step.
    pub fn build(&self, ctx: ComponentContext) -> Result<Box<dyn Component>, ComponentError> {
        let clock: Arc<dyn Clock> = ctx.clock.clone();
        let bad = |e: &dyn std::fmt::Display| ComponentError::Config(e.to_string());
        Ok(match self {
            RoleConfig::Driver(c) => {
                let adapter = c.adapter.build(clock).map_err(|e| bad(&e))?;
                let prompt = match &c.system_prompt_file {
                    Some(path) => std::fs::read_to_string(path)
                        .map_err(|e| bad(&format!("{}: {e}", path.display())))?,
                    None => c.system_prompt.clone(),
                };
                Box::new(Driver::new(ctx, adapter, DriverSettings::with_system_prompt(prompt)))
            }
            RoleConfig::Voter(c) => {
                Box::new(Voter::new(ctx, &c.voter_type, c.behavior.clone()).map_err(|e| bad(&e))?)
            }
            RoleConfig::Decider(c) => Box::new(Decider::new(
                ctx,
                c.policy.clone(),
                Duration::from_millis(c.timeout_ms),
            )),
            RoleConfig::Executor(c) => {
                let sandbox = Sandbox::new(&c.sandbox)
                    .map_err(|e| bad(&format!("{}: {e}", c.sandbox.display())))?
                    .with_timeout(Duration::from_millis(c.action_timeout_ms));
                Box::new(Executor::new(ctx, sandbox))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotConfig {
    pub dir: PathBuf,
    #[serde(default = "default_snapshot_every")]
    pub every: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentConfig {
    pub bus: String,
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshots: Option<SnapshotConfig>,
    #[serde(default)]
    pub sync: SyncChoice,
    #[serde(flatten)]
    pub role: RoleConfig,
}

/// Durability of appends made by a component process.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncChoice {
    #[default]
    Always,
    Batched,
}

impl From<SyncChoice> for SyncMode {
    fn from(c: SyncChoice) -> SyncMode {
        match c {
            SyncChoice::Always => SyncMode::Always,
            SyncChoice::Batched => SyncMode::batched(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
}

impl ComponentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }
}
