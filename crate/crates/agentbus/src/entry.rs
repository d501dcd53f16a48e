use serde::{Deserialize, Serialize};

use crate::types::{Payload, PayloadType};
use crate::Position;

/// A position-stamped, time-stamped, typed record on the bus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub position: Position,
    /// Milliseconds since the Unix epoch, assigned by the backend.
    pub realtime_ts: u64,
    pub payload: Payload,
}

impl Entry {
    pub fn payload_type(&self) -> PayloadType {
        self.payload.payload_type()
    }

    /// Size of the encoded body document.
    pub fn body_len(&self) -> usize {
        self.payload.encode_body().len()
    }

    /// Self-describing text record: position, timestamp, then the tagged payload.
    pub fn to_record_json(&self) -> String {
        serde_json::to_string(self).expect("entries always serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_json_shape() {
        let e = Entry {
            position: 3,
            realtime_ts: 17,
            payload: Payload::commit(2),
        };
        assert_eq!(
            e.to_record_json(),
            r#"{"position":3,"realtime_ts":17,"payload":{"type":"Commit","body":{"intent_position":2}}}"#
        );
        let back: Entry = serde_json::from_str(&e.to_record_json()).unwrap();
        assert_eq!(back, e);
    }
}
