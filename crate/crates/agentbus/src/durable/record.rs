//! On-disk framing for the durable bus.
//!
//! A bus file is an 8-byte header followed by records in position order:
//!
//! ```text
//! header   8 bytes   b"AGBUS\0\0\x01"
//! record   u32 LE    len: number of bytes after the crc field (17 + body length)
//!          u32 LE    crc: CRC-32 (IEEE) over those `len` bytes
//!          u64 LE    position
//!          u64 LE    realtime_ts (ms since Unix epoch)
//!          u8        type tag (InfIn=0 .. Policy=8)
//!          [u8]      body: the payload body as a JSON document
//! ```
//!
//! A final record that is incomplete or fails its checksum is a torn write
//! and is truncated on open. Any other damage is reported as corruption.

use crate::entry::Entry;
use crate::error::BusError;
use crate::types::{Payload, PayloadType};
use crate::Position;

pub const MAGIC: &[u8; 8] = b"AGBUS\0\0\x01";
pub const HEADER_LEN: usize = MAGIC.len();
/// len + crc
pub const FRAME_PREFIX: usize = 8;
/// position + realtime_ts + tag
pub const FIXED_LEN: usize = 17;
/// Larger lengths are treated as damage rather than allocated.
pub const MAX_RECORD: usize = 256 << 20;

/// Encodes one record, returning the frame bytes.
pub fn encode(position: Position, realtime_ts: u64, payload: &Payload) -> Vec<u8> {
    let body = payload.encode_body();
    let len = FIXED_LEN + body.len();
    let mut out = Vec::with_capacity(FRAME_PREFIX + len);
    out.extend_from_slice(&(len as u32).to_le_bytes());
    out.extend_from_slice(&[0; 4]);
    out.extend_from_slice(&position.to_le_bytes());
    out.extend_from_slice(&realtime_ts.to_le_bytes());
    out.push(payload.payload_type().tag());
    out.extend_from_slice(&body);
    let crc = crc32fast::hash(&out[FRAME_PREFIX..]);
    out[4..8].copy_from_slice(&crc.to_le_bytes());
    out
}

/// A decoded record and its on-disk size.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub entry: Entry,
    pub frame_len: usize,
    pub body_len: usize,
}

/// How a scan ended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TailState {
    /// The buffer ended exactly on a record boundary.
    Clean,
    /// The bytes after `valid_len` are a partial or unverifiable final record.
    Torn,
}

#[derive(Debug)]
pub struct Scan {
    pub records: Vec<Decoded>,
    /// Bytes of `buf` covered by complete, verified records.
    pub valid_len: usize,
    pub tail: TailState,
}

/// Scans `buf` (which begins at file offset `base`) for records, expecting
/// the first one to carry `first_position`.
pub fn scan(buf: &[u8], base: u64, first_position: Position) -> Result<Scan, BusError> {
    let mut records = Vec::new();
    let mut at = 0usize;
    let mut expected = first_position;
    let corrupt = |at: usize, reason: String| BusError::CorruptLog {
        offset: base + at as u64,
        reason,
    };
    loop {
        let rest = &buf[at..];
        if rest.is_empty() {
            return Ok(Scan {
                records,
                valid_len: at,
                tail: TailState::Clean,
            });
        }
        let torn = |records, at| {
            Ok(Scan {
                records,
                valid_len: at,
                tail: TailState::Torn,
            })
        };
        // Preallocated-but-unwritten space after a crash reads as zeros.
        if rest.len() < FRAME_PREFIX || rest.iter().all(|b| *b == 0) {
            return torn(records, at);
        }
        let len = u32::from_le_bytes(rest[0..4].try_into().unwrap()) as usize;
        let crc = u32::from_le_bytes(rest[4..8].try_into().unwrap());
        if !(FIXED_LEN..=MAX_RECORD).contains(&len) {
            return Err(corrupt(at, format!("bad record length {len}")));
        }
        if rest.len() < FRAME_PREFIX + len {
            return torn(records, at);
        }
        let frame = &rest[FRAME_PREFIX..FRAME_PREFIX + len];
        let is_last = rest.len() == FRAME_PREFIX + len;
        if crc32fast::hash(frame) != crc {
            if is_last {
                return torn(records, at);
            }
            return Err(corrupt(at, "checksum mismatch".into()));
        }
        let position = u64::from_le_bytes(frame[0..8].try_into().unwrap());
        let realtime_ts = u64::from_le_bytes(frame[8..16].try_into().unwrap());
        let tag = frame[16];
        if position != expected {
            return Err(corrupt(
                at,
                format!("expected position {expected}, found {position}"),
            ));
        }
        let ty = PayloadType::from_tag(tag)
            .ok_or_else(|| corrupt(at, format!("unknown type tag {tag}")))?;
        let body = &frame[FIXED_LEN..];
        let payload = Payload::decode_body(ty, body)
            .map_err(|e| corrupt(at, format!("undecodable {ty} body: {e}")))?;
        records.push(Decoded {
            entry: Entry {
                position,
                realtime_ts,
                payload,
            },
            frame_len: FRAME_PREFIX + len,
            body_len: body.len(),
        });
        at += FRAME_PREFIX + len;
        expected += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames(n: u64) -> Vec<u8> {
        let mut buf = Vec::new();
        for i in 0..n {
            buf.extend(encode(i, 100 + i, &Payload::mail("u", format!("m{i}"))));
        }
        buf
    }

    #[test]
    fn frame_layout_is_fixed() {
        let f = encode(7, 9, &Payload::commit(3));
        let body = br#"{"intent_position":3}"#;
        assert_eq!(f.len(), 8 + 17 + body.len());
        assert_eq!(&f[0..4], &((17 + body.len()) as u32).to_le_bytes());
        assert_eq!(&f[8..16], &7u64.to_le_bytes());
        assert_eq!(&f[16..24], &9u64.to_le_bytes());
        assert_eq!(f[24], PayloadType::Commit.tag());
        assert_eq!(&f[25..], body);
        assert_eq!(
            u32::from_le_bytes(f[4..8].try_into().unwrap()),
            crc32fast::hash(&f[8..])
        );
    }

    #[test]
    fn clean_scan() {
        let buf = frames(3);
        let s = scan(&buf, 8, 0).unwrap();
        assert_eq!(s.records.len(), 3);
        assert_eq!(s.valid_len, buf.len());
        assert_eq!(s.tail, TailState::Clean);
    }

    #[test]
    fn every_truncation_point_is_a_torn_tail() {
        let buf = frames(3);
        let two = scan(&buf, 0, 0).unwrap().records[..2]
            .iter()
            .map(|d| d.frame_len)
            .sum::<usize>();
        for cut in two + 1..buf.len() {
            let s = scan(&buf[..cut], 0, 0).unwrap();
            assert_eq!(s.records.len(), 2, "cut at {cut}");
            assert_eq!(s.valid_len, two);
            assert_eq!(s.tail, TailState::Torn);
        }
    }

    #[test]
    fn middle_damage_is_corruption() {
        let mut buf = frames(3);
        buf[30] ^= 0xff;
        assert!(matches!(
            scan(&buf, 0, 0),
            Err(BusError::CorruptLog { offset: 0, .. })
        ));
    }

    #[test]
    fn damaged_last_record_is_torn() {
        let mut buf = frames(3);
        let n = buf.len();
        buf[n - 2] ^= 0x01;
        let s = scan(&buf, 0, 0).unwrap();
        assert_eq!(s.records.len(), 2);
        assert_eq!(s.tail, TailState::Torn);
    }

    #[test]
    fn zero_fill_is_torn() {
        let mut buf = frames(2);
        let valid = buf.len();
        buf.extend_from_slice(&[0u8; 64]);
        let s = scan(&buf, 0, 0).unwrap();
        assert_eq!(s.valid_len, valid);
        assert_eq!(s.tail, TailState::Torn);
    }

    #[test]
    fn position_gap_is_corruption() {
        let mut buf = encode(0, 1, &Payload::commit(0));
        buf.extend(encode(2, 1, &Payload::commit(0)));
        buf.extend(encode(3, 1, &Payload::commit(0)));
        assert!(scan(&buf, 0, 0).is_err());
    }
}
