use std::time::Duration;

use agentbus::{Message, MessageRole};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{InferenceAdapter, InferenceError};

fn default_timeout_ms() -> u64 {
    60_000
}

/// A chat-completions style endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding a bearer token, if the endpoint needs one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_env: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

/// Sends the whole history on every call; the endpoint keeps no state.
#[derive(Debug)]
pub struct HttpAdapter {
    config: HttpConfig,
    agent: ureq::Agent,
}

impl HttpAdapter {
    pub fn new(config: HttpConfig) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build();
        HttpAdapter { config, agent }
    }

    pub fn request_body(&self, conversation: &[Message]) -> Value {
        let messages: Vec<Value> = conversation
            .iter()
            .map(|m| {
                let role = match m.role {
                    MessageRole::System => "system",
                    MessageRole::User => "user",
                    MessageRole::Assistant => "assistant",
                    MessageRole::Tool => "tool",
                };
                json!({"role": role, "content": m.content})
            })
            .collect();
        json!({"model": self.config.model, "messages": messages})
    }
}

impl InferenceAdapter for HttpAdapter {
    fn infer(&self, conversation: &[Message]) -> Result<String, InferenceError> {
        if conversation.is_empty() {
            return Err(InferenceError::EmptyConversation);
        }
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(var) = &self.config.token_env {
            let token = std::env::var(var)
                .map_err(|_| InferenceError::Unavailable(format!("token variable {var} is not set")))?;
            req = req.set("Authorization", &format!("Bearer {token}"));
        }
        let resp: Value = req
            .send_json(self.request_body(conversation))
            .map_err(|e| InferenceError::Unavailable(e.to_string()))?
            .into_json()
            .map_err(|e| InferenceError::Unavailable(e.to_string()))?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| InferenceError::Unavailable("response has no choices[0].message.content".into()))
    }
}
