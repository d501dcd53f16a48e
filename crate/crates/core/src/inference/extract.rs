//! Action-block grammar.
//!
//! An inference output proposes an action with a fenced block tagged
//! `action`:
//!
//! ````text
//! ```action
//! kind: shell
//! workdir: src
//! body: cc -o hello hello.c
//! ```
//! ````
//!
//! `kind` (`shell` or `builtin`) and `body` are required, `workdir` defaults
//! to `.`. Everything after `body:` up to the closing fence belongs to the
//! body, so bodies may span lines. Only the first block of a message counts.

use agentbus::{ActionKind, ActionSpec};
use thiserror::Error;

const OPEN: &str = "```action";
const CLOSE: &str = "```";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("malformed action block: {0}")]
pub struct MalformedActionBlock(pub String);

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Extraction {
    pub action: Option<ActionSpec>,
    pub warnings: Vec<String>,
}

pub fn extract_intent(text: &str) -> Extraction {
    let lines: Vec<&str> = text.lines().collect();
    let opens: Vec<usize> = lines
        .iter()
        .enumerate()
        .filter(|(_, l)| l.trim() == OPEN)
        .map(|(i, _)| i)
        .collect();
    let Some(&first) = opens.first() else {
        return Extraction::default();
    };
    let mut warnings = Vec::new();
    if opens.len() > 1 {
        warnings.push(format!(
            "{} action blocks found; only the first is used",
            opens.len()
        ));
    }
    let action = match parse_block(&lines[first + 1..]) {
        Ok(a) => Some(a),
        Err(e) => {
            warnings.push(e.to_string());
            None
        }
    };
    Extraction { action, warnings }
}

fn parse_block(rest: &[&str]) -> Result<ActionSpec, MalformedActionBlock> {
    let end = rest
        .iter()
        .position(|l| l.trim() == CLOSE)
        .ok_or_else(|| MalformedActionBlock("unterminated block".into()))?;
    let block = &rest[..end];
    let mut kind = None;
    let mut workdir = None;
    let mut body: Option<Vec<&str>> = None;
    for line in block {
        if let Some(b) = body.as_mut() {
            b.push(line);
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| MalformedActionBlock(format!("expected `key: value`, got `{line}`")))?;
        let value = value.trim();
        match key.trim() {
            "kind" => {
                kind = Some(match value {
                    "shell" => ActionKind::Shell,
                    "builtin" => ActionKind::Builtin,
                    other => return Err(MalformedActionBlock(format!("unknown kind `{other}`"))),
                })
            }
            "workdir" => workdir = Some(value.to_string()),
            "body" => body = Some(if value.is_empty() { vec![] } else { vec![value] }),
            other => return Err(MalformedActionBlock(format!("unknown field `{other}`"))),
        }
    }
    let kind = kind.ok_or_else(|| MalformedActionBlock("missing `kind`".into()))?;
    let body = body
        .map(|b| b.join("\n").trim_end().to_string())
        .filter(|b| !b.trim().is_empty())
        .ok_or_else(|| MalformedActionBlock("missing or empty `body`".into()))?;
    let workdir = workdir.filter(|w| !w.is_empty()).unwrap_or_else(|| ".".into());
    Ok(ActionSpec {
        kind,
        body,
        workdir,
    })
}
