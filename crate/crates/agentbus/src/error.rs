use thiserror::Error;

use crate::types::PayloadType;
use crate::Position;

#[derive(Debug, Error)]
pub enum BusError {
    #[error("client `{client}` may not {op} {ty} entries")]
    PermissionDenied {
        client: String,
        op: &'static str,
        ty: PayloadType,
    },
    #[error("poll filter must name at least one type")]
    EmptyFilter,
    #[error("invalid range [{start}, {end})")]
    InvalidRange { start: Position, end: Position },
    #[error("bus is closed")]
    BusClosed,
    #[error("unknown payload type `{0}`")]
    UnknownType(String),
    #[error("invalid permissions: {0}")]
    InvalidPermissions(String),
    #[error("corrupt log at byte offset {offset}: {reason}")]
    CorruptLog { offset: u64, reason: String },
    #[error("injected fault: {0}")]
    Fault(String),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}

impl BusError {
    pub fn is_permission_denied(&self) -> bool {
        matches!(self, BusError::PermissionDenied { .. })
    }
}

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("corrupt snapshot for `{component}`: {reason}")]
    Corrupt { component: String, reason: String },
    #[error("snapshot position {position} is beyond the bus tail {tail}")]
    BeyondTail { position: Position, tail: Position },
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}
