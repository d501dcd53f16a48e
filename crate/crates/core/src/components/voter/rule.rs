//! Rule-based ("classic") voting.
//!
//! Rule file (JSON), first match wins:
//!
//! ```text
//! {
//!   "rules": [
//!     {"pattern": {"regex": "rm\\s+-rf"}, "verdict": "reject"},
//!     {"pattern": {"glob": "rm *.tmp"}, "verdict": "approve", "scope": "body"},
//!     {"pattern": {"glob": "/etc*"}, "verdict": "reject", "scope": "workdir"}
//!   ],
//!   "default": "approve"
//! }
//! ```
//!
//! Regexes search anywhere in the scoped text; globs must match all of it.
//! `scope` is `body` (default) or `workdir`. A voter policy addressed to a
//! rule voter may carry `prepend` and `append` rule lists and a new `default`.

use agentbus::{ActionSpec, Verdict};
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Ballot, VoteBehavior, VoteContext, VoterError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Glob(String),
    Regex(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleScope {
    #[default]
    Body,
    Workdir,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub pattern: Pattern,
    pub verdict: Verdict,
    #[serde(default)]
    pub scope: RuleScope,
}

impl Rule {
    pub fn regex(pattern: &str, verdict: Verdict) -> Self {
        Rule {
            pattern: Pattern::Regex(pattern.into()),
            verdict,
            scope: RuleScope::Body,
        }
    }

    pub fn glob(pattern: &str, verdict: Verdict) -> Self {
        Rule {
            pattern: Pattern::Glob(pattern.into()),
            verdict,
            scope: RuleScope::Body,
        }
    }
}

fn default_verdict() -> Verdict {
    Verdict::Approve
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSet {
    #[serde(default)]
    pub rules: Vec<Rule>,
    #[serde(default = "default_verdict")]
    pub default: Verdict,
}

impl Default for RuleSet {
    fn default() -> Self {
        RuleSet {
            rules: Vec::new(),
            default: Verdict::Approve,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RulePolicy {
    #[serde(default)]
    prepend: Vec<Rule>,
    #[serde(default)]
    append: Vec<Rule>,
    default: Option<Verdict>,
}

enum Matcher {
    Glob(glob::Pattern),
    Regex(Regex),
}

struct Compiled {
    rule: Rule,
    matcher: Matcher,
}

fn compile(rule: Rule) -> Result<Compiled, VoterError> {
    let matcher = match &rule.pattern {
        Pattern::Glob(g) => Matcher::Glob(
            glob::Pattern::new(g).map_err(|e| VoterError::Config(format!("glob `{g}`: {e}")))?,
        ),
        Pattern::Regex(r) => {
            Matcher::Regex(Regex::new(r).map_err(|e| VoterError::Config(format!("regex `{r}`: {e}")))?)
        }
    };
    Ok(Compiled { rule, matcher })
}

/// A compiled, ordered rule list.
pub struct RuleEngine {
    rules: Vec<Compiled>,
    default: Verdict,
}

impl RuleEngine {
    pub fn new(set: RuleSet) -> Result<Self, VoterError> {
        Ok(RuleEngine {
            rules: set.rules.into_iter().map(compile).collect::<Result<_, _>>()?,
            default: set.default,
        })
    }

    pub fn judge(&self, action: &ActionSpec) -> (Verdict, String) {
        for (i, c) in self.rules.iter().enumerate() {
            let text = match c.rule.scope {
                RuleScope::Body => action.body.as_str(),
                RuleScope::Workdir => action.workdir.as_str(),
            };
            let (hit, shown) = match (&c.matcher, &c.rule.pattern) {
                (Matcher::Glob(g), Pattern::Glob(s)) => (g.matches(text), format!("glob `{s}`")),
                (Matcher::Regex(r), Pattern::Regex(s)) => (r.is_match(text), format!("regex `{s}`")),
                _ => unreachable!("matcher compiled from its pattern"),
            };
            if hit {
                return (c.rule.verdict, format!("rule {} ({shown}) matched", i + 1));
            }
        }
        (self.default, "no rule matched; default verdict".into())
    }
}

impl VoteBehavior for RuleEngine {
    fn vote(&mut self, ctx: &VoteContext<'_>) -> Result<Ballot, VoterError> {
        let (verdict, rationale) = self.judge(ctx.action);
        Ok(Ballot::Cast { verdict, rationale })
    }

    fn apply_policy(&mut self, body: &Value) -> Result<(), VoterError> {
        let p: RulePolicy = serde_json::from_value(body.clone())
            .map_err(|e| VoterError::Policy(e.to_string()))?;
        let prepend = p.prepend.into_iter().map(compile).collect::<Result<Vec<_>, _>>()?;
        let append = p.append.into_iter().map(compile).collect::<Result<Vec<_>, _>>()?;
        self.rules.splice(0..0, prepend);
        self.rules.extend(append);
        if let Some(d) = p.default {
            self.default = d;
        }
        Ok(())
    }
}
