use std::collections::HashMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::SnapshotError;
use crate::Position;

/// Component state bound to the log prefix `[0, log_position)` it covers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub component_id: String,
    pub log_position: Position,
    #[serde(with = "b64")]
    pub state: Vec<u8>,
    pub created_ts: u64,
}

mod b64 {
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        base64::engine::general_purpose::STANDARD
            .decode(text)
            .map_err(serde::de::Error::custom)
    }
}

/// Latest-wins key/value storage of component snapshots.
pub trait SnapshotStore: Send + Sync {
    fn put(&self, snapshot: &Snapshot) -> Result<(), SnapshotError>;
    fn get_latest(&self, component_id: &str) -> Result<Option<Snapshot>, SnapshotError>;
}

#[derive(Debug, Default)]
pub struct MemorySnapshotStore {
    map: Mutex<HashMap<String, Snapshot>>,
}

impl MemorySnapshotStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl SnapshotStore for MemorySnapshotStore {
    fn put(&self, snapshot: &Snapshot) -> Result<(), SnapshotError> {
        self.map
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(snapshot.component_id.clone(), snapshot.clone());
        Ok(())
    }

    fn get_latest(&self, component_id: &str) -> Result<Option<Snapshot>, SnapshotError> {
        Ok(self
            .map
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .get(component_id)
            .cloned())
    }
}

static TMP_SEQ: AtomicU64 = AtomicU64::new(0);

const SNAP_MAGIC: &[u8; 8] = b"LASNAP01";

/// One file per component under a per-bus directory, replaced by atomic
/// rename:
///
/// ```text
/// <root>/<bus_id>/<component_id>.snap
///   8 bytes  b"LASNAP01"
///   u32 LE   CRC-32 of the JSON document
///   [u8]     JSON document (Snapshot, state base64-encoded)
/// ```
#[derive(Debug, Clone)]
pub struct DirSnapshotStore {
    dir: PathBuf,
}

impl DirSnapshotStore {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, SnapshotError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        Ok(DirSnapshotStore { dir })
    }

    pub fn for_bus(root: impl AsRef<Path>, bus_id: &str) -> Result<Self, SnapshotError> {
        Self::open(root.as_ref().join(file_key(bus_id)))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, component_id: &str) -> PathBuf {
        self.dir.join(format!("{}.snap", file_key(component_id)))
    }
}

/// Keeps component ids filesystem-safe without collisions.
fn file_key(id: &str) -> String {
    let mut out = String::with_capacity(id.len());
    for b in id.bytes() {
        let safe = b.is_ascii_alphanumeric()
            || b == b'-'
            || b == b'_'
            || (b == b'.' && !out.is_empty());
        if safe {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

impl SnapshotStore for DirSnapshotStore {
    fn put(&self, snapshot: &Snapshot) -> Result<(), SnapshotError> {
        let doc = serde_json::to_vec(snapshot).expect("snapshots serialize");
        let mut bytes = Vec::with_capacity(doc.len() + 12);
        bytes.extend_from_slice(SNAP_MAGIC);
        bytes.extend_from_slice(&crc32fast::hash(&doc).to_le_bytes());
        bytes.extend_from_slice(&doc);

        let target = self.path_for(&snapshot.component_id);
        let tmp = self.dir.join(format!(
            ".{}.tmp.{}.{}",
            file_key(&snapshot.component_id),
            std::process::id(),
            TMP_SEQ.fetch_add(1, Ordering::Relaxed)
        ));
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &target)?;
        File::open(&self.dir)?.sync_all()?;
        Ok(())
    }

    fn get_latest(&self, component_id: &str) -> Result<Option<Snapshot>, SnapshotError> {
        let bytes = match fs::read(self.path_for(component_id)) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let corrupt = |reason: &str| SnapshotError::Corrupt {
            component: component_id.to_string(),
            reason: reason.to_string(),
        };
        if bytes.len() < 12 || &bytes[..8] != SNAP_MAGIC {
            return Err(corrupt("bad header"));
        }
        let crc = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let doc = &bytes[12..];
        if crc32fast::hash(doc) != crc {
            return Err(corrupt("checksum mismatch"));
        }
        let snap: Snapshot = serde_json::from_slice(doc).map_err(|e| corrupt(&e.to_string()))?;
        if snap.component_id != component_id {
            return Err(corrupt("component id mismatch"));
        }
        Ok(Some(snap))
    }
}
