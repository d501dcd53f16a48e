//! Deterministic stand-in for a model.
//!
//! Rules file (JSON):
//!
//! ```text
//! {
//!   "rules": [
//!     {"match": {"contains": "hello task"}, "respond": "```action\nkind: shell\nbody: ...\n```"},
//!     {"match": {"regex": "Found (\\d+) lines"}, "respond": "... process_items out.txt ${1+1} 50 ..."},
//!     {"match": "always", "respond": "..."}
//!   ],
//!   "default": "TASK COMPLETE",
//!   "delay_ms": 1000
//! }
//! ```
//!
//! Rules are tried in order against the latest user or tool message; the
//! first match renders its template. `${N}` inserts capture group N (`${0}` is
//! the whole match), `${name}` a named group, and `${N+K}` / `${N-K}` the group
//! read as an integer plus or minus K. `$$` is a literal `$`. Without a match
//! the `default` text is returned. `delay_ms` is slept on the adapter's clock
//! before every reply.

use std::path::Path;
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use agentbus::{Clock, Message, MessageRole};
use regex::{Captures, Regex};
use serde::{Deserialize, Serialize};

use super::{InferenceAdapter, InferenceError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchRule {
    Contains(String),
    Regex(String),
    Always,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedRule {
    #[serde(rename = "match")]
    pub matcher: MatchRule,
    pub respond: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRules {
    #[serde(default)]
    pub rules: Vec<ScriptedRule>,
    pub default: String,
    #[serde(default)]
    pub delay_ms: u64,
}

impl ScriptRules {
    pub fn new(default: impl Into<String>) -> Self {
        ScriptRules {
            rules: Vec::new(),
            default: default.into(),
            delay_ms: 0,
        }
    }

    pub fn contains(mut self, needle: impl Into<String>, respond: impl Into<String>) -> Self {
        self.rules.push(ScriptedRule {
            matcher: MatchRule::Contains(needle.into()),
            respond: respond.into(),
        });
        self
    }

    pub fn regex(mut self, pattern: impl Into<String>, respond: impl Into<String>) -> Self {
        self.rules.push(ScriptedRule {
            matcher: MatchRule::Regex(pattern.into()),
            respond: respond.into(),
        });
        self
    }

    pub fn with_delay(mut self, delay_ms: u64) -> Self {
        self.delay_ms = delay_ms;
        self
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, std::io::Error> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

enum Compiled {
    Contains(String),
    Regex(Regex),
    Always,
}

pub struct ScriptedAdapter {
    rules: Vec<(Compiled, String)>,
    default: String,
    delay: Duration,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for ScriptedAdapter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScriptedAdapter")
            .field("rules", &self.rules.len())
            .field("delay", &self.delay)
            .finish()
    }
}

impl ScriptedAdapter {
    pub fn new(rules: ScriptRules, clock: Arc<dyn Clock>) -> Result<Self, regex::Error> {
        let compiled = rules
            .rules
            .into_iter()
            .map(|r| {
                let m = match r.matcher {
                    MatchRule::Contains(s) => Compiled::Contains(s),
                    MatchRule::Regex(p) => Compiled::Regex(Regex::new(&p)?),
                    MatchRule::Always => Compiled::Always,
                };
                Ok((m, r.respond))
            })
            .collect::<Result<_, regex::Error>>()?;
        Ok(ScriptedAdapter {
            rules: compiled,
            default: rules.default,
            delay: Duration::from_millis(rules.delay_ms),
            clock,
        })
    }

    /// The reply for `conversation`, without the delay.
    pub fn respond(&self, conversation: &[Message]) -> String {
        let latest = conversation
            .iter()
            .rev()
            .find(|m| matches!(m.role, MessageRole::User | MessageRole::Tool))
            .map(|m| m.content.as_str());
        let Some(latest) = latest else {
            return self.default.clone();
        };
        for (matcher, template) in &self.rules {
            match matcher {
                Compiled::Contains(needle) if latest.contains(needle.as_str()) => {
                    return render(template, None);
                }
                Compiled::Regex(re) => {
                    if let Some(caps) = re.captures(latest) {
                        return render(template, Some(&caps));
                    }
                }
                Compiled::Always => return render(template, None),
                Compiled::Contains(_) => {}
            }
        }
        self.default.clone()
    }
}

impl InferenceAdapter for ScriptedAdapter {
    fn infer(&self, conversation: &[Message]) -> Result<String, InferenceError> {
        if conversation.is_empty() {
            return Err(InferenceError::EmptyConversation);
        }
        if !self.delay.is_zero() {
            self.clock.sleep(self.delay);
        }
        Ok(self.respond(conversation))
    }
}

fn placeholder() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\$\$|\$\{(\w+)(?:([+-])(\d+))?\}").expect("valid pattern"))
}

fn render(template: &str, caps: Option<&Captures<'_>>) -> String {
    placeholder()
        .replace_all(template, |m: &Captures<'_>| {
            if &m[0] == "$$" {
                return "$".to_string();
            }
            let name = &m[1];
            let group = caps.and_then(|c| match name.parse::<usize>() {
                Ok(i) => c.get(i),
                Err(_) => c.name(name),
            });
            let Some(text) = group.map(|g| g.as_str()) else {
                return String::new();
            };
            match (m.get(2), m.get(3)) {
                (Some(op), Some(k)) => {
                    let (Ok(v), Ok(k)) = (text.trim().parse::<i64>(), k.as_str().parse::<i64>())
                    else {
                        return text.to_string();
                    };
                    let out = if op.as_str() == "+" { v + k } else { v - k };
                    out.to_string()
                }
                _ => text.to_string(),
            }
        })
        .into_owned()
}
