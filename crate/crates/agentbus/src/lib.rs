//! A typed, access-controlled shared log.
//!
//! Every entry on an [`AgentBus`] carries one of nine payload types. Clients
//! hold a [`ClientIdentity`] whose [`Permissions`] decide which types they may
//! append, read and poll. Two backends are provided: [`MemoryBus`] for
//! in-process use and [`DurableBus`], a checksummed single-file log that
//! survives process restarts and can be shared between processes.
//!
//! Component state that is derived from the log can be checkpointed in a
//! [`SnapshotStore`] and restored by replaying the suffix of the log.

mod acl;
mod bus;
mod clock;
mod durable;
mod entry;
mod error;
mod memory;
mod snapshot;
mod types;

pub use acl::{ClientIdentity, Permissions};
pub use bus::{AgentBus, BusClient, SharedBus};
pub use clock::{Clock, SystemClock, VirtualClock};
pub use durable::{record, DurableBus, StorageStats, SyncMode};
pub use entry::Entry;
pub use error::{BusError, SnapshotError};
pub use memory::MemoryBus;
pub use snapshot::{DirSnapshotStore, MemorySnapshotStore, Snapshot, SnapshotStore};
pub use types::{
    AbortBody, ActionKind, ActionSpec, CommitBody, InfInBody, InfOutBody, IntentBody, MailBody,
    Message, MessageRole, Payload, PayloadType, PolicyBody, PolicyKind, ResultBody, ResultStatus,
    TypeSet, Verdict, VoteBody,
};

/// A log slot. Positions start at zero and are dense.
pub type Position = u64;
