//! Versioned, checksummed state snapshots.
//!
//! A snapshot captures everything a resume needs from before its tail
//! replay: the search state, program attachments, and accumulated planner
//! history, stamped with the sequence number of the last folded event.
//! Snapshots are advisory: restore falls back to a full log fold when none
//! validates.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::planner::HistoryItem;
use crate::tree::{Program, ProgramId, SearchState};

use super::TraceError;

pub const SNAPSHOT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotPayload {
    /// Sequence number of the last event folded into `state`.
    pub last_seq: u64,
    pub round: u32,
    pub state: SearchState,
    /// Programs still reachable from the tree: node attachments and the
    /// run best.
    pub programs: BTreeMap<ProgramId, Program>,
    /// Accumulated planner history lines.
    pub history: Vec<HistoryItem>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotFile {
    format_version: u32,
    /// Hex SHA-256 of the payload's canonical JSON encoding.
    checksum: String,
    payload: serde_json::Value,
}

fn checksum_of(payload_json: &str) -> String {
    hex::encode(Sha256::digest(payload_json.as_bytes()))
}

/// Writes a snapshot atomically (temp file + rename) and returns its path.
pub fn write_snapshot(dir: &Path, payload: &SnapshotPayload) -> Result<PathBuf, TraceError> {
    let value = serde_json::to_value(payload)?;
    let body = serde_json::to_string(&value)?;
    let file = SnapshotFile {
        format_version: SNAPSHOT_FORMAT_VERSION,
        checksum: checksum_of(&body),
        payload: value,
    };
    let path = dir.join(format!("round_{:06}.json", payload.round));
    let tmp = dir.join(format!(".round_{:06}.tmp", payload.round));
    fs::write(&tmp, serde_json::to_string(&file)?)?;
    fs::rename(&tmp, &path)?;
    Ok(path)
}

/// Reads and validates one snapshot file. Version and checksum failures are
/// explicit errors, never silent reinterpretation.
pub fn read_snapshot(path: &Path) -> Result<SnapshotPayload, TraceError> {
    let raw = fs::read_to_string(path)?;
    let file: SnapshotFile = serde_json::from_str(&raw).map_err(|e| TraceError::Corrupt {
        line: 0,
        message: format!("snapshot {}: {e}", path.display()),
    })?;
    if file.format_version != SNAPSHOT_FORMAT_VERSION {
        return Err(TraceError::VersionMismatch {
            path: path.to_owned(),
            found: file.format_version,
            expected: SNAPSHOT_FORMAT_VERSION,
        });
    }
    let body = serde_json::to_string(&file.payload)?;
    if checksum_of(&body) != file.checksum {
        return Err(TraceError::ChecksumMismatch {
            path: path.to_owned(),
        });
    }
    Ok(serde_json::from_value(file.payload)?)
}

/// Newest snapshot that passes validation. Invalid files are skipped with a
/// warning; an unreadable directory means no snapshot.
pub fn latest_valid_snapshot(dir: &Path) -> Option<(PathBuf, SnapshotPayload)> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .ok()?
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    for path in paths.into_iter().rev() {
        match read_snapshot(&path) {
            Ok(payload) => return Some((path, payload)),
            Err(e) => log::warn!("skipping snapshot {}: {e}", path.display()),
        }
    }
    None
}
