//! LogAct: an agent built as a deconstructed state machine over an [`agentbus`].
//!
//! The agent loop is split into four components that share nothing but the
//! bus:
//!
//! * the [`Driver`](components::Driver) plays mail and results, calls the
//!   inference layer and appends intents;
//! * [`Voter`](components::Voter)s play intents and append votes;
//! * the [`Decider`](components::Decider) folds votes through the active
//!   [`DeciderPolicy`](policy::DeciderPolicy) into commits and aborts;
//! * the [`Executor`](components::Executor) plays commits, runs the action in
//!   its sandbox and appends the result.
//!
//! Each component's state is a deterministic fold over the log, so a crashed
//! component recovers by loading a snapshot and replaying the suffix. The
//! [`kernel`] stands buses and components up; the [`harness`] drives
//! deterministic scenarios with injected faults and checks the protocol
//! invariants over the resulting log.

pub mod components;
pub mod config;
pub mod harness;
pub mod inference;
pub mod kernel;
pub mod policy;
pub mod roles;
pub mod runner;

pub use agentbus;
