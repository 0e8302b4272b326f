//! Append-only event log: the single source of truth for a run.
//!
//! One JSON record per line. The writer appends each logical step as one
//! buffered write ending in a newline and flushes to disk before the engine
//! proceeds, so a killed process loses at most the step it had not yet
//! committed. The reader tolerates a partial trailing line (dropped and
//! overwritten on resume) but treats anything else unparsable as corruption.

pub mod replay;
pub mod snapshot;

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::{EngineConfig, RefinementOutcome};
use crate::planner::{PlanPhase, PlannerRequest, RawExchange};
use crate::score::ScoreBreakdown;
use crate::task::Task;
use crate::tree::{NodeId, Observation, Program, ProgramId, TreeEdit};

pub const TRACE_FILE: &str = "run.log";
pub const SNAPSHOT_DIR: &str = "snapshots";
pub const BLOB_DIR: &str = "blobs";

/// Source of the per-record timestamp. The logical clock makes traces of
/// deterministic runs byte-identical: it stamps each record with its own
/// sequence number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClockMode {
    Logical,
    #[default]
    System,
}

impl std::str::FromStr for ClockMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "logical" => Ok(ClockMode::Logical),
            "system" => Ok(ClockMode::System),
            other => Err(format!("unknown clock mode {other:?} (logical|system)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    Engine,
    Baseline,
}

/// How a run ended. Aborts (infrastructure/backend) leave no RunEnded event
/// behind: the log stays open for resumption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExitStatus {
    Completed,
    FrontierExhausted,
    InfrastructureError,
    BackendError,
}

impl ExitStatus {
    /// Normal completions exit 0; aborts are distinguishable by code.
    pub fn exit_code(self) -> i32 {
        match self {
            ExitStatus::Completed | ExitStatus::FrontierExhausted => 0,
            ExitStatus::InfrastructureError => 3,
            ExitStatus::BackendError => 4,
        }
    }
}

impl std::fmt::Display for ExitStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ExitStatus::Completed => "completed",
            ExitStatus::FrontierExhausted => "frontier-exhausted",
            ExitStatus::InfrastructureError => "infrastructure-error",
            ExitStatus::BackendError => "backend-error",
        };
        f.write_str(s)
    }
}

/// Resolved configuration recorded in RunStarted so a run directory is
/// self-describing and resumable without the original command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfigRecord {
    pub mode: RunMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub engine: Option<EngineConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<crate::baseline::BaselineConfig>,
    /// Backend spec strings, e.g. "scripted:rules.toml" or "llm:conf.toml".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planner: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coder: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mutator: Option<String>,
    pub evaluator: String,
    pub clock: ClockMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestRef {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub program_id: Option<ProgramId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceEvent {
    /// Always the first event. Carries the fully resolved task (landscape
    /// inlined) so replay needs no external files.
    RunStarted {
        config: RunConfigRecord,
        task: Task,
    },
    /// A task-supplied starting implementation attached to the root,
    /// unevaluated and uncharged.
    InitialProgramAttached { program: Program },
    /// One planner call that produced a usable response. `retries_used`
    /// counts discarded malformed responses before it.
    PlannerExchange {
        phase: PlanPhase,
        correction: bool,
        request_digest: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        response_blob: Option<String>,
        retries_used: u32,
    },
    /// One edit the engine attempted to apply, accepted or not. Inserts
    /// record the node id they created.
    EditApplied {
        edit: TreeEdit,
        accepted: bool,
        reason: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        assigned_node_id: Option<NodeId>,
    },
    ActionSelected { node_id: NodeId, priority: f64 },
    /// A generated candidate, recorded in full before evaluation begins.
    CandidateGenerated {
        node_id: NodeId,
        attempt_index: u32,
        program: Program,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        coder_blob: Option<String>,
    },
    /// A coder attempt that produced no usable program. Consumes no budget;
    /// counts toward stagnation. The allocated program id is burned.
    GenerationFailed {
        node_id: NodeId,
        program_id: ProgramId,
        attempt_index: u32,
        reason: String,
    },
    /// The budget unit: exactly one of these per evaluator invocation.
    CandidateEvaluated {
        program_id: ProgramId,
        observation: Observation,
        scores: ScoreBreakdown,
    },
    NodeClosed { outcome: RefinementOutcome },
    /// Baseline bookkeeping: archive insertion attempt for an evaluated
    /// candidate.
    ArchiveUpdated {
        program_id: ProgramId,
        inserted: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        evicted: Option<ProgramId>,
    },
    RunEnded { exit_status: ExitStatus, best: BestRef },
}

/// Log line envelope. `round` is the number of evaluations completed (the
/// record that completes evaluation r carries round = r).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub seq: u64,
    pub round: u32,
    pub ts_ms: u64,
    pub event: TraceEvent,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace storage: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace encoding: {0}")]
    Encode(#[from] serde_json::Error),
    #[error("corrupt trace line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("trace sequence gap at line {line}: expected seq {expected}, found {found}")]
    SequenceGap { line: usize, expected: u64, found: u64 },
    #[error("snapshot {path}: checksum mismatch")]
    ChecksumMismatch { path: PathBuf },
    #[error("snapshot {path}: format version {found} unsupported (expected {expected}); migration required")]
    VersionMismatch { path: PathBuf, found: u32, expected: u32 },
    #[error("replay diverged: {0}")]
    Replay(String),
    #[error("run directory busy: {0}")]
    Locked(String),
    #[error("{0}")]
    Invalid(String),
}

/// Single-producer append handle over `run.log` plus the blob store.
pub struct TraceWriter {
    file: File,
    run_dir: PathBuf,
    next_seq: u64,
    clock: ClockMode,
}

impl TraceWriter {
    /// Creates a fresh log in `run_dir` (which must not already hold one)
    /// along with the snapshot and blob directories.
    pub fn create(run_dir: &Path, clock: ClockMode) -> Result<TraceWriter, TraceError> {
        std::fs::create_dir_all(run_dir)?;
        std::fs::create_dir_all(run_dir.join(SNAPSHOT_DIR))?;
        std::fs::create_dir_all(run_dir.join(BLOB_DIR))?;
        let file = OpenOptions::new()
            .create_new(true)
            .write(true)
            .open(run_dir.join(TRACE_FILE))?;
        Ok(TraceWriter {
            file,
            run_dir: run_dir.to_owned(),
            next_seq: 1,
            clock,
        })
    }

    /// Reopens an existing log for continuation, discarding any partial
    /// tail beyond `valid_len`.
    pub fn resume(
        run_dir: &Path,
        clock: ClockMode,
        valid_len: u64,
        next_seq: u64,
    ) -> Result<TraceWriter, TraceError> {
        std::fs::create_dir_all(run_dir.join(SNAPSHOT_DIR))?;
        std::fs::create_dir_all(run_dir.join(BLOB_DIR))?;
        let file = OpenOptions::new()
            .write(true)
            .open(run_dir.join(TRACE_FILE))?;
        file.set_len(valid_len)?;
        let mut file = file;
        file.seek(SeekFrom::End(0))?;
        Ok(TraceWriter {
            file,
            run_dir: run_dir.to_owned(),
            next_seq,
            clock,
        })
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn clock_mode(&self) -> ClockMode {
        self.clock
    }

    fn now_ms(&self, seq: u64) -> u64 {
        match self.clock {
            ClockMode::Logical => seq,
            ClockMode::System => SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
        }
    }

    /// Appends one logical step as a single durable write. Returns the
    /// sequence numbers assigned.
    pub fn append_group(
        &mut self,
        round: u32,
        events: Vec<TraceEvent>,
    ) -> Result<Vec<u64>, TraceError> {
        let mut buffer = Vec::with_capacity(events.len() * 256);
        let mut seqs = Vec::with_capacity(events.len());
        for event in events {
            let seq = self.next_seq;
            self.next_seq += 1;
            let record = TraceRecord {
                seq,
                round,
                ts_ms: self.now_ms(seq),
                event,
            };
            serde_json::to_writer(&mut buffer, &record)?;
            buffer.push(b'\n');
            seqs.push(seq);
        }
        self.file.write_all(&buffer)?;
        self.file.flush()?;
        self.file.sync_data()?;
        Ok(seqs)
    }

    pub fn append(&mut self, round: u32, event: TraceEvent) -> Result<u64, TraceError> {
        Ok(self.append_group(round, vec![event])?[0])
    }

    /// Stores a raw LLM exchange content-addressed under `blobs/` and
    /// returns its log reference. Identical exchanges share one file.
    pub fn store_blob(&self, exchange: &RawExchange) -> Result<String, TraceError> {
        let body = serde_json::to_string(exchange)?;
        let digest = hex::encode(Sha256::digest(body.as_bytes()));
        let name = format!("{}.json", &digest[..32]);
        let path = self.run_dir.join(BLOB_DIR).join(&name);
        if !path.exists() {
            let tmp = path.with_extension("tmp");
            std::fs::write(&tmp, &body)?;
            std::fs::rename(&tmp, &path)?;
        }
        Ok(format!("{BLOB_DIR}/{name}"))
    }
}

/// Digest of a planner request, recorded with every exchange.
pub fn request_digest(req: &PlannerRequest) -> String {
    let body = serde_json::to_string(req).expect("planner request serializes");
    hex::encode(Sha256::digest(body.as_bytes()))
}

#[derive(Debug)]
pub struct ScanOutcome {
    pub records: Vec<TraceRecord>,
    /// Byte length of the well-formed prefix; resume truncates to this.
    pub valid_len: u64,
    /// Whether a partial trailing line was dropped.
    pub dropped_tail: bool,
}

/// Reads and validates a log. A final line that does not parse (or lacks
/// its newline) is treated as a torn write and dropped; unparsable content
/// before that is corruption.
pub fn scan_log(path: &Path) -> Result<ScanOutcome, TraceError> {
    let raw = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    let mut valid_len = 0u64;
    let mut dropped_tail = false;
    let mut offset = 0usize;
    let mut line_no = 0usize;
    for line in raw.split_inclusive('\n') {
        let start = offset;
        offset += line.len();
        line_no += 1;
        let body = line.trim_end_matches('\n');
        if body.is_empty() {
            valid_len = offset as u64;
            continue;
        }
        let complete = line.ends_with('\n');
        match serde_json::from_str::<TraceRecord>(body) {
            Ok(record) if complete => {
                let expected = records.len() as u64 + 1;
                if record.seq != expected {
                    return Err(TraceError::SequenceGap {
                        line: line_no,
                        expected,
                        found: record.seq,
                    });
                }
                records.push(record);
                valid_len = offset as u64;
            }
            // A record without its newline may be a torn final write even
            // if it happens to parse; never trust it.
            Ok(_) | Err(_) if start + line.len() == raw.len() => {
                dropped_tail = true;
                break;
            }
            Ok(_) => unreachable!("complete lines are handled above"),
            Err(e) => {
                return Err(TraceError::Corrupt {
                    line: line_no,
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(ScanOutcome {
        records,
        valid_len,
        dropped_tail,
    })
}

/// Loads a blob reference produced by [`TraceWriter::store_blob`].
pub fn load_blob(run_dir: &Path, reference: &str) -> Result<RawExchange, TraceError> {
    let body = std::fs::read_to_string(run_dir.join(reference))?;
    Ok(serde_json::from_str(&body)?)
}

pub const OVERRIDES_FILE: &str = "overrides.json";

/// Post-hoc adjustments to a recorded run (currently budget extensions).
/// Stored beside run.log rather than in it, so the log prefix stays
/// byte-identical to what the original process wrote.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overrides {
    #[serde(default)]
    pub extensions: Vec<BudgetExtension>,
}

/// One `resume --budget` grant: `added` extra evaluations, effective for
/// every event at or after `at_seq`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetExtension {
    pub at_seq: u64,
    pub added: u32,
}

impl Overrides {
    pub fn total_added(&self) -> u32 {
        self.extensions.iter().map(|e| e.added).sum()
    }

    /// Extensions granted at or after `seq`: the ones a replay starting
    /// from that point has not already folded in.
    pub fn added_since(&self, seq: u64) -> u32 {
        self.extensions
            .iter()
            .filter(|e| e.at_seq >= seq)
            .map(|e| e.added)
            .sum()
    }
}

pub fn load_overrides(run_dir: &Path) -> Result<Overrides, TraceError> {
    let path = run_dir.join(OVERRIDES_FILE);
    if !path.exists() {
        return Ok(Overrides::default());
    }
    let body = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&body)?)
}

/// Durably records one extension (read-modify-write via tmp+rename).
pub fn record_extension(run_dir: &Path, extension: BudgetExtension) -> Result<(), TraceError> {
    let mut overrides = load_overrides(run_dir)?;
    overrides.extensions.push(extension);
    let path = run_dir.join(OVERRIDES_FILE);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(&overrides)?)?;
    std::fs::rename(&tmp, &path)?;
    Ok(())
}

/// Programs recorded in a trace, keyed by id.
pub fn programs_in(records: &[TraceRecord]) -> BTreeMap<ProgramId, Program> {
    let mut programs = BTreeMap::new();
    for record in records {
        match &record.event {
            TraceEvent::CandidateGenerated { program, .. }
            | TraceEvent::InitialProgramAttached { program } => {
                programs.insert(program.id, program.clone());
            }
            _ => {}
        }
    }
    programs
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn ended(status: ExitStatus) -> TraceEvent {
        TraceEvent::RunEnded {
            exit_status: status,
            best: BestRef {
                program_id: None,
                score: None,
            },
        }
    }

    #[test]
    fn append_then_scan_round_trips() {
        let dir = tempdir().unwrap();
        let run = dir.path().join("r");
        let mut w = TraceWriter::create(&run, ClockMode::Logical).unwrap();
        w.append(0, ended(ExitStatus::Completed)).unwrap();
        w.append(0, ended(ExitStatus::FrontierExhausted)).unwrap();
        let scan = scan_log(&run.join(TRACE_FILE)).unwrap();
        assert_eq!(scan.records.len(), 2);
        assert_eq!(scan.records[0].seq, 1);
        assert_eq!(scan.records[1].seq, 2);
        assert_eq!(scan.records[1].ts_ms, 2, "logical clock stamps seq");
        assert!(!scan.dropped_tail);
        assert!(matches!(
            scan.records[1].event,
            TraceEvent::RunEnded {
                exit_status: ExitStatus::FrontierExhausted,
                ..
            }
        ));
    }

    #[test]
    fn partial_tail_is_dropped_and_resume_truncates() {
        let dir = tempdir().unwrap();
        let run = dir.path().join("r");
        let mut w = TraceWriter::create(&run, ClockMode::Logical).unwrap();
        w.append(0, ended(ExitStatus::Completed)).unwrap();
        let log = run.join(TRACE_FILE);
        let mut raw = std::fs::read(&log).unwrap();
        let full = raw.len() as u64;
        raw.extend_from_slice(b"{\"seq\":2,\"round\":0");
        std::fs::write(&log, &raw).unwrap();

        let scan = scan_log(&log).unwrap();
        assert_eq!(scan.records.len(), 1);
        assert_eq!(scan.valid_len, full);
        assert!(scan.dropped_tail);

        let mut w2 = TraceWriter::resume(&run, ClockMode::Logical, scan.valid_len, 2).unwrap();
        w2.append(0, ended(ExitStatus::Completed)).unwrap();
        let rescan = scan_log(&log).unwrap();
        assert_eq!(rescan.records.len(), 2);
        assert!(!rescan.dropped_tail);
    }

    #[test]
    fn unterminated_but_parsable_tail_is_still_dropped() {
        let dir = tempdir().unwrap();
        let run = dir.path().join("r");
        let mut w = TraceWriter::create(&run, ClockMode::Logical).unwrap();
        w.append(0, ended(ExitStatus::Completed)).unwrap();
        let log = run.join(TRACE_FILE);
        let mut raw = std::fs::read_to_string(&log).unwrap();
        let keep = raw.len();
        let second = raw.clone();
        raw.push_str(second.trim_end());
        // Rewrite seq so it would otherwise be accepted.
        let raw = raw.replacen("\"seq\":1", "\"seq\":2", 2);
        let raw = raw.replacen("\"seq\":2", "\"seq\":1", 1);
        std::fs::write(&log, &raw).unwrap();
        let scan = scan_log(&log).unwrap();
        assert_eq!(scan.records.len(), 1);
        assert_eq!(scan.valid_len as usize, keep);
        assert!(scan.dropped_tail);
    }

    #[test]
    fn mid_file_garbage_is_corruption() {
        let dir = tempdir().unwrap();
        let run = dir.path().join("r");
        let mut w = TraceWriter::create(&run, ClockMode::Logical).unwrap();
        w.append(0, ended(ExitStatus::Completed)).unwrap();
        let log = run.join(TRACE_FILE);
        let mut raw = std::fs::read_to_string(&log).unwrap();
        raw = format!("not json\n{raw}");
        std::fs::write(&log, &raw).unwrap();
        assert!(matches!(
            scan_log(&log),
            Err(TraceError::Corrupt { line: 1, .. })
        ));
    }

    #[test]
    fn sequence_gap_is_detected() {
        let dir = tempdir().unwrap();
        let run = dir.path().join("r");
        let mut w = TraceWriter::create(&run, ClockMode::Logical).unwrap();
        w.append(0, ended(ExitStatus::Completed)).unwrap();
        w.append(0, ended(ExitStatus::Completed)).unwrap();
        let log = run.join(TRACE_FILE);
        let raw = std::fs::read_to_string(&log).unwrap();
        let lines: Vec<&str> = raw.lines().collect();
        std::fs::write(&log, format!("{}\n{}\n{}\n", lines[0], lines[1], lines[1])).unwrap();
        assert!(matches!(
            scan_log(&log),
            Err(TraceError::SequenceGap {
                line: 3,
                expected: 3,
                found: 2
            })
        ));
    }

    #[test]
    fn blobs_are_content_addressed_and_reloadable() {
        let dir = tempdir().unwrap();
        let run = dir.path().join("r");
        let w = TraceWriter::create(&run, ClockMode::Logical).unwrap();
        let exchange = RawExchange {
            request_body: "{\"q\":1}".to_owned(),
            response_body: "{\"a\":2}".to_owned(),
        };
        let r1 = w.store_blob(&exchange).unwrap();
        let r2 = w.store_blob(&exchange).unwrap();
        assert_eq!(r1, r2, "identical content, one blob");
        assert!(run.join(&r1).is_file());
        assert_eq!(load_blob(&run, &r1).unwrap(), exchange);
    }

    #[test]
    fn create_refuses_to_clobber_existing_log() {
        let dir = tempdir().unwrap();
        let run = dir.path().join("r");
        let _w = TraceWriter::create(&run, ClockMode::Logical).unwrap();
        assert!(TraceWriter::create(&run, ClockMode::Logical).is_err());
    }

    #[test]
    fn group_append_is_one_contiguous_block() {
        let dir = tempdir().unwrap();
        let run = dir.path().join("r");
        let mut w = TraceWriter::create(&run, ClockMode::Logical).unwrap();
        let seqs = w
            .append_group(
                3,
                vec![ended(ExitStatus::Completed), ended(ExitStatus::Completed)],
            )
            .unwrap();
        assert_eq!(seqs, vec![1, 2]);
        let scan = scan_log(&run.join(TRACE_FILE)).unwrap();
        assert_eq!(scan.records.len(), 2);
        assert!(scan.records.iter().all(|r| r.round == 3));
    }
}
