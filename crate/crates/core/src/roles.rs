//! Least-privilege permission sets for each component role.

use std::fmt;
use std::str::FromStr;

use agentbus::{ClientIdentity, PayloadType as T, Permissions, TypeSet};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Driver,
    Voter,
    Decider,
    Executor,
    /// Operators: mail and policy.
    Admin,
    /// External users and agents: mail only.
    User,
}

impl Role {
    pub const COMPONENTS: [Role; 4] = [Role::Driver, Role::Voter, Role::Decider, Role::Executor];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Driver => "driver",
            Role::Voter => "voter",
            Role::Decider => "decider",
            Role::Executor => "executor",
            Role::Admin => "admin",
            Role::User => "user",
        }
    }

    /// The grant for this role. Appends follow the "appended by" column of the
    /// entry table, polls the "played by" column; reads add the context each
    /// role needs to interpret what it plays.
    pub fn permissions(self) -> Permissions {
        let (append, read, poll): (&[T], &[T], &[T]) = match self {
            Role::Driver => (
                // Policy is needed for self-election.
                &[T::InfIn, T::InfOut, T::Intent, T::Policy],
                &[
                    T::Mail,
                    T::InfIn,
                    T::InfOut,
                    T::Intent,
                    T::Commit,
                    T::Abort,
                    T::Result,
                    T::Policy,
                ],
                &[
                    T::Mail,
                    T::InfIn,
                    T::InfOut,
                    T::Intent,
                    T::Abort,
                    T::Result,
                    T::Policy,
                ],
            ),
            Role::Voter => (
                &[T::Vote],
                &[
                    T::Mail,
                    T::InfOut,
                    T::Intent,
                    T::Vote,
                    T::Commit,
                    T::Abort,
                    T::Result,
                    T::Policy,
                ],
                &[T::Intent, T::Vote, T::Commit, T::Abort, T::Policy],
            ),
            Role::Decider => (
                &[T::Commit, T::Abort],
                &[T::Intent, T::Vote, T::Commit, T::Abort, T::Policy],
                &[T::Intent, T::Vote, T::Commit, T::Abort, T::Policy],
            ),
            Role::Executor => (
                &[T::Result],
                &[T::Intent, T::Commit, T::Abort, T::Policy],
                &[T::Commit, T::Policy],
            ),
            Role::Admin => (&[T::Mail, T::Policy], &T::ALL, &T::ALL),
            Role::User => (&[T::Mail], &T::ALL, &T::ALL),
        };
        Permissions::new(TypeSet::of(append), TypeSet::of(read), TypeSet::of(poll))
            .expect("role grants keep pollable within readable")
    }

    pub fn identity(self, client_id: impl Into<String>) -> ClientIdentity {
        ClientIdentity::new(client_id, self.permissions())
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "driver" => Ok(Role::Driver),
            "voter" => Ok(Role::Voter),
            "decider" => Ok(Role::Decider),
            "executor" => Ok(Role::Executor),
            "admin" => Ok(Role::Admin),
            "user" => Ok(Role::User),
            other => Err(format!("unknown role `{other}`")),
        }
    }
}
