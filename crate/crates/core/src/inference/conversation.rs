use agentbus::Message;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("previous conversation ({prev} messages) is not a prefix of the next ({next} messages)")]
pub struct NotAPrefix {
    pub prev: usize,
    pub next: usize,
}

/// The message history sent to the model.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Conversation(pub Vec<Message>);

impl Conversation {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn messages(&self) -> &[Message] {
        &self.0
    }

    pub fn push(&mut self, message: Message) {
        self.0.push(message);
    }

    pub fn extend(&mut self, delta: impl IntoIterator<Item = Message>) {
        self.0.extend(delta);
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bytes(&self) -> usize {
        self.0.iter().map(|m| m.content.len()).sum()
    }
}

/// The messages `next` adds on top of `prev`.
pub fn delta_of<'a>(prev: &[Message], next: &'a [Message]) -> Result<&'a [Message], NotAPrefix> {
    if next.len() < prev.len() || next[..prev.len()] != *prev {
        return Err(NotAPrefix {
            prev: prev.len(),
            next: next.len(),
        });
    }
    Ok(&next[prev.len()..])
}
