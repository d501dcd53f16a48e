//! The pluggable inference layer.

mod conversation;
mod extract;
mod http;
mod scripted;

use std::sync::Arc;

use agentbus::{Clock, Message};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use conversation::{delta_of, Conversation, NotAPrefix};
pub use extract::{extract_intent, Extraction, MalformedActionBlock};
pub use http::{HttpAdapter, HttpConfig};
pub use scripted::{MatchRule, ScriptRules, ScriptedAdapter, ScriptedRule};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("inference adapter unavailable: {0}")]
    Unavailable(String),
    #[error("empty conversation")]
    EmptyConversation,
}

/// Turns a conversation into the next assistant message.
pub trait InferenceAdapter: Send + Sync {
    fn infer(&self, conversation: &[Message]) -> Result<String, InferenceError>;
}

/// Replies with the latest message, for plumbing tests.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoAdapter;

impl InferenceAdapter for EchoAdapter {
    fn infer(&self, conversation: &[Message]) -> Result<String, InferenceError> {
        let last = conversation.last().ok_or(InferenceError::EmptyConversation)?;
        Ok(format!("echo: {}", last.content))
    }
}

/// Adapter selection as it appears in component configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "adapter", rename_all = "snake_case")]
pub enum AdapterConfig {
    Echo,
    /// Rules inline, or loaded from `rules_file`.
    Scripted {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rules: Option<ScriptRules>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rules_file: Option<std::path::PathBuf>,
    },
    Http(HttpConfig),
}

impl AdapterConfig {
    pub fn scripted(rules: ScriptRules) -> Self {
        AdapterConfig::Scripted {
            rules: Some(rules),
            rules_file: None,
        }
    }

    pub fn build(&self, clock: Arc<dyn Clock>) -> Result<Arc<dyn InferenceAdapter>, InferenceError> {
        Ok(match self {
            AdapterConfig::Echo => Arc::new(EchoAdapter),
            AdapterConfig::Scripted { rules, rules_file } => {
                let rules = match (rules, rules_file) {
                    (Some(r), _) => r.clone(),
                    (None, Some(path)) => ScriptRules::load(path)
                        .map_err(|e| InferenceError::Unavailable(e.to_string()))?,
                    (None, None) => {
                        return Err(InferenceError::Unavailable(
                            "scripted adapter needs `rules` or `rules_file`".into(),
                        ))
                    }
                };
                Arc::new(
                    ScriptedAdapter::new(rules, clock)
                        .map_err(|e| InferenceError::Unavailable(e.to_string()))?,
                )
            }
            AdapterConfig::Http(cfg) => Arc::new(HttpAdapter::new(cfg.clone())),
        })
    }
}
