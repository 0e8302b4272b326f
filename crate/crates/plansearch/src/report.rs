//! Reporting over recorded traces: best-so-far curves, Fast_p tables,
//! per-workload speedup dumps, and search-tree exports.
//!
//! Everything here is a pure function of recorded data; reports are
//! deterministic documents suitable for golden-file comparison.

use serde::Serialize;
use thiserror::Error;

use crate::score::{self, ScoreBreakdown};
use crate::trace::{TraceEvent, TraceRecord};
use crate::tree::{NodeStatus, ProgramId, SearchState};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ReportError {
    #[error("nothing to report")]
    EmptyInput,
}

/// One point of the best-so-far curve: the best aggregate score achieved in
/// the first `round` evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub round: u32,
    pub best_score: f64,
}

/// Running maximum of aggregate scores over evaluation rounds. One entry per
/// evaluation, so the curve length equals the rounds used; non-decreasing by
/// construction.
pub fn best_so_far_curve(records: &[TraceRecord]) -> Result<Vec<CurvePoint>, ReportError> {
    let mut curve = Vec::new();
    let mut best = f64::NEG_INFINITY;
    for record in records {
        if let TraceEvent::CandidateEvaluated { scores, .. } = &record.event {
            best = best.max(scores.aggregate);
            curve.push(CurvePoint {
                round: record.round,
                best_score: best,
            });
        }
    }
    if curve.is_empty() {
        return Err(ReportError::EmptyInput);
    }
    Ok(curve)
}

/// The run's best program and its full score breakdown, reconstructed from
/// the evaluation stream with the same strict-improvement rule the engine
/// uses (first program to reach the maximum wins ties).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BestProgramReport {
    pub program_id: ProgramId,
    pub aggregate: f64,
    pub breakdown: ScoreBreakdown,
}

pub fn best_program_report(records: &[TraceRecord]) -> Result<BestProgramReport, ReportError> {
    let mut best: Option<BestProgramReport> = None;
    for record in records {
        if let TraceEvent::CandidateEvaluated {
            program_id, scores, ..
        } = &record.event
        {
            let improved = match &best {
                Some(b) => scores.aggregate > b.aggregate,
                None => true,
            };
            if improved {
                best = Some(BestProgramReport {
                    program_id: *program_id,
                    aggregate: scores.aggregate,
                    breakdown: scores.clone(),
                });
            }
        }
    }
    best.ok_or(ReportError::EmptyInput)
}

/// One run's row in a Fast_p comparison: per-workload speedups of the best
/// program and the fraction meeting each threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FastPRow {
    pub label: String,
    pub best_program_id: ProgramId,
    pub best_score: f64,
    /// `(workload_id, speedup)` in task order; 0 for failed workloads.
    pub speedups: Vec<(String, f64)>,
    /// Parallel to the table's thresholds.
    pub fast_p: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FastPTable {
    pub thresholds: Vec<f64>,
    pub rows: Vec<FastPRow>,
}

/// Builds the Fast_p table for one or more runs, preserving the given run
/// order. Errors if any run has no evaluations or no workloads.
pub fn fast_p_table(
    runs: &[(String, &[TraceRecord])],
    thresholds: &[f64],
) -> Result<FastPTable, ReportError> {
    if runs.is_empty() {
        return Err(ReportError::EmptyInput);
    }
    let mut rows = Vec::with_capacity(runs.len());
    for (label, records) in runs {
        let best = best_program_report(records)?;
        let speedups: Vec<(String, f64)> = best
            .breakdown
            .per_workload
            .iter()
            .map(|w| (w.workload_id.clone(), w.speedup))
            .collect();
        let values: Vec<f64> = speedups.iter().map(|(_, s)| *s).collect();
        let fast_p = thresholds
            .iter()
            .map(|t| score::fast_p(&values, *t).map_err(|_| ReportError::EmptyInput))
            .collect::<Result<Vec<f64>, ReportError>>()?;
        rows.push(FastPRow {
            label: label.clone(),
            best_program_id: best.program_id,
            best_score: best.aggregate,
            speedups,
            fast_p,
        });
    }
    Ok(FastPTable {
        thresholds: thresholds.to_vec(),
        rows,
    })
}

fn csv_field(value: &str) -> String {
    if value.contains(',') || value.contains('"') || value.contains('\n') {
        format!("\"{}\"", value.replace('"', "\"\""))
    } else {
        value.to_owned()
    }
}

/// `round,best_score` rows, one per evaluation, concatenated across runs.
pub fn curves_csv(runs: &[(String, Vec<CurvePoint>)]) -> String {
    let mut out = String::from("run,round,best_score\n");
    for (label, curve) in runs {
        for point in curve {
            out.push_str(&format!(
                "{},{},{}\n",
                csv_field(label),
                point.round,
                point.best_score
            ));
        }
    }
    out
}

/// Wide table: one row per run, one `fast_p@threshold` column per threshold.
pub fn fast_p_csv(table: &FastPTable) -> String {
    let mut out = String::from("run,best_score");
    for t in &table.thresholds {
        out.push_str(&format!(",fast_p@{t}"));
    }
    out.push('\n');
    for row in &table.rows {
        out.push_str(&csv_field(&row.label));
        out.push_str(&format!(",{}", row.best_score));
        for v in &row.fast_p {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// Long table: `run,workload,speedup` for every run's best program.
pub fn speedup_csv(table: &FastPTable) -> String {
    let mut out = String::from("run,workload,speedup\n");
    for row in &table.rows {
        for (workload, speedup) in &row.speedups {
            out.push_str(&format!(
                "{},{},{}\n",
                csv_field(&row.label),
                csv_field(workload),
                speedup
            ));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    GraphDot,
    Structured,
}

impl std::str::FromStr for ExportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<ExportFormat, String> {
        match s {
            "graph-dot" => Ok(ExportFormat::GraphDot),
            "structured" => Ok(ExportFormat::Structured),
            other => Err(format!(
                "unknown export format {other:?}; expected graph-dot or structured"
            )),
        }
    }
}

/// Renders the hypothesis tree. Both formats are deterministic functions of
/// the state: nodes in id order, every status colored, scores on closed
/// nodes, priorities on open ones, and insert/update/prune rounds annotated.
pub fn export_tree(state: &SearchState, format: ExportFormat) -> String {
    match format {
        ExportFormat::GraphDot => export_dot(state),
        ExportFormat::Structured => export_structured(state),
    }
}

fn dot_escape(text: &str) -> String {
    text.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', "\\n")
}

fn clip(text: &str, limit: usize) -> String {
    if text.len() <= limit {
        return text.to_owned();
    }
    let mut end = limit;
    while end > 0 && !text.is_char_boundary(end) {
        end -= 1;
    }
    format!("{}...", &text[..end])
}

fn export_dot(state: &SearchState) -> String {
    let mut out = String::from("digraph search_tree {\n");
    out.push_str("  rankdir=TB;\n");
    out.push_str("  node [shape=box, style=filled, fontname=\"monospace\"];\n");
    for node in state.nodes.values() {
        let color = match node.status {
            NodeStatus::Open => "khaki",
            NodeStatus::Closed => "palegreen",
            NodeStatus::Pruned => "lightgray",
        };
        let status = match node.status {
            NodeStatus::Open => "open",
            NodeStatus::Closed => "closed",
            NodeStatus::Pruned => "pruned",
        };
        let mut label = format!(
            "{} {} (ins r{})\\n{}",
            node.id,
            status,
            node.inserted_round,
            dot_escape(&clip(&node.intent, 60))
        );
        match node.status {
            NodeStatus::Open => label.push_str(&format!("\\npriority {}", node.priority)),
            NodeStatus::Closed | NodeStatus::Pruned => {
                if let Some(score) = node.attached_score {
                    label.push_str(&format!("\\nscore {score}"));
                }
            }
        }
        for entry in node.priority_history.iter().skip(1) {
            label.push_str(&format!("\\nr{}: priority -> {}", entry.round, entry.value));
        }
        if let Some(round) = node.pruned_round {
            let rationale = node.pruned_rationale.as_deref().unwrap_or("");
            label.push_str(&format!(
                "\\npruned r{round}: {}",
                dot_escape(&clip(rationale, 60))
            ));
        }
        out.push_str(&format!(
            "  {} [label=\"{}\", fillcolor=\"{}\"];\n",
            node.id, label, color
        ));
    }
    for node in state.nodes.values() {
        if let Some(parent) = node.parent {
            out.push_str(&format!("  {} -> {};\n", parent, node.id));
        }
    }
    out.push_str("}\n");
    out
}

fn export_structured(state: &SearchState) -> String {
    #[derive(Serialize)]
    struct TreeDoc<'a> {
        root_id: crate::tree::NodeId,
        round: u32,
        budget_remaining: u32,
        #[serde(skip_serializing_if = "Option::is_none")]
        best_program_id: Option<ProgramId>,
        #[serde(skip_serializing_if = "Option::is_none")]
        best_score: Option<f64>,
        nodes: Vec<&'a crate::tree::ActionNode>,
    }
    let doc = TreeDoc {
        root_id: state.root_id,
        round: state.round,
        budget_remaining: state.budget_remaining,
        best_program_id: state.best_program_id,
        best_score: state.best_score,
        nodes: state.nodes.values().collect(),
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("tree export serializes");
    text.push('\n');
    text
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::WorkloadScore;
    use crate::trace::{BestRef, ExitStatus};
    use crate::tree::{Observation, TreeEdit};

    fn eval_record(seq: u64, round: u32, program: u64, aggregate: f64) -> TraceRecord {
        TraceRecord {
            seq,
            round,
            ts_ms: seq,
            event: TraceEvent::CandidateEvaluated {
                program_id: ProgramId(program),
                observation: Observation::new(Vec::new(), String::new()),
                scores: ScoreBreakdown {
                    per_workload: Vec::new(),
                    aggregate,
                },
            },
        }
    }

    fn eval_with_speedups(seq: u64, aggregate: f64, speedups: &[f64]) -> TraceRecord {
        let per_workload = speedups
            .iter()
            .enumerate()
            .map(|(i, s)| WorkloadScore {
                workload_id: format!("w{i}"),
                speedup: *s,
                score: 100.0 * s,
            })
            .collect();
        TraceRecord {
            seq,
            round: seq as u32,
            ts_ms: seq,
            event: TraceEvent::CandidateEvaluated {
                program_id: ProgramId(seq),
                observation: Observation::new(Vec::new(), String::new()),
                scores: ScoreBreakdown {
                    per_workload,
                    aggregate,
                },
            },
        }
    }

    #[test]
    fn curve_is_running_max_over_rounds() {
        let records = vec![
            eval_record(1, 1, 1, 0.0),
            eval_record(2, 2, 2, 34.0),
            eval_record(3, 3, 3, 20.0),
            eval_record(4, 4, 4, 50.0),
        ];
        let curve = best_so_far_curve(&records).unwrap();
        let values: Vec<f64> = curve.iter().map(|p| p.best_score).collect();
        assert_eq!(values, vec![0.0, 34.0, 34.0, 50.0]);
        let rounds: Vec<u32> = curve.iter().map(|p| p.round).collect();
        assert_eq!(rounds, vec![1, 2, 3, 4]);
    }

    #[test]
    fn single_round_curve_has_single_entry() {
        let records = vec![eval_record(1, 1, 1, 12.5)];
        let curve = best_so_far_curve(&records).unwrap();
        assert_eq!(curve.len(), 1);
        assert_eq!(curve[0].best_score, 12.5);
    }

    #[test]
    fn empty_trace_is_empty_input() {
        assert_eq!(best_so_far_curve(&[]), Err(ReportError::EmptyInput));
        assert_eq!(best_program_report(&[]), Err(ReportError::EmptyInput));
    }

    #[test]
    fn curve_final_value_matches_run_ended_best() {
        let mut records = vec![
            eval_record(1, 1, 1, 10.0),
            eval_record(2, 2, 2, 60.0),
            eval_record(3, 3, 3, 42.0),
        ];
        records.push(TraceRecord {
            seq: 4,
            round: 3,
            ts_ms: 4,
            event: TraceEvent::RunEnded {
                exit_status: ExitStatus::Completed,
                best: BestRef {
                    program_id: Some(ProgramId(2)),
                    score: Some(60.0),
                },
            },
        });
        let curve = best_so_far_curve(&records).unwrap();
        let ended_best = records
            .iter()
            .find_map(|r| match &r.event {
                TraceEvent::RunEnded { best, .. } => best.score,
                _ => None,
            })
            .unwrap();
        assert_eq!(curve.last().unwrap().best_score, ended_best);
        let best = best_program_report(&records).unwrap();
        assert_eq!(best.program_id, ProgramId(2));
    }

    #[test]
    fn ties_keep_the_first_program() {
        let records = vec![eval_record(1, 1, 7, 50.0), eval_record(2, 2, 8, 50.0)];
        assert_eq!(best_program_report(&records).unwrap().program_id, ProgramId(7));
    }

    #[test]
    fn fast_p_table_hits_headline_fixture() {
        // 8 workloads, 7 of them at or above 0.5: 87.5%.
        let speedups = [2.0, 0.6, 0.5, 0.49, 1.0, 0.5, 0.51, 3.0];
        let records = vec![eval_with_speedups(1, 100.0, &speedups)];
        let runs = vec![("demo".to_owned(), records.as_slice())];
        let table = fast_p_table(&runs, &[0.5, 1.0]).unwrap();
        assert_eq!(table.rows[0].fast_p, vec![0.875, 0.375]);
        assert_eq!(table.rows[0].speedups.len(), 8);

        let csv = fast_p_csv(&table);
        assert!(csv.starts_with("run,best_score,fast_p@0.5,fast_p@1\n"));
        assert!(csv.contains("demo,100,0.875,0.375\n"));
        let dump = speedup_csv(&table);
        assert!(dump.contains("demo,w0,2\n"));
        assert!(dump.contains("demo,w3,0.49\n"));
    }

    #[test]
    fn csv_quotes_awkward_fields() {
        assert_eq!(csv_field("plain"), "plain");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
    }

    #[test]
    fn curve_csv_rows_match_points() {
        let runs = vec![
            (
                "run-a".to_owned(),
                vec![
                    CurvePoint { round: 1, best_score: 0.0 },
                    CurvePoint { round: 2, best_score: 34.0 },
                ],
            ),
            ("run,b".to_owned(), vec![CurvePoint { round: 1, best_score: 5.0 }]),
        ];
        let csv = curves_csv(&runs);
        assert_eq!(
            csv,
            "run,round,best_score\nrun-a,1,0\nrun-a,2,34\n\"run,b\",1,5\n"
        );
    }

    fn sample_state() -> SearchState {
        let mut state = SearchState::new("minimize latency", 10);
        let root = state.root_id;
        state
            .apply_edit(
                &TreeEdit::Insert {
                    parent: root,
                    intent: "tile the outer loop".to_owned(),
                    priority: 0.9,
                },
                0,
            )
            .unwrap();
        state
            .apply_edit(
                &TreeEdit::Insert {
                    parent: root,
                    intent: "swizzle the layout".to_owned(),
                    priority: 0.6,
                },
                0,
            )
            .unwrap();
        state
            .apply_edit(
                &TreeEdit::Update {
                    node: crate::tree::NodeId(2),
                    priority: 0.3,
                    rationale: "weaker than expected".to_owned(),
                },
                4,
            )
            .unwrap();
        state
            .record_closure(crate::tree::NodeId(1), Some(ProgramId(1)), Some(62.5))
            .unwrap();
        state
            .apply_edit(
                &TreeEdit::Prune {
                    node: crate::tree::NodeId(2),
                    rationale: "dominated".to_owned(),
                },
                5,
            )
            .unwrap();
        state
    }

    #[test]
    fn dot_export_colors_statuses_and_annotates_edits() {
        let state = sample_state();
        let dot = export_tree(&state, ExportFormat::GraphDot);
        assert!(dot.starts_with("digraph search_tree {"));
        assert!(dot.contains("n000001 closed (ins r0)"));
        assert!(dot.contains("score 62.5"));
        assert!(dot.contains("fillcolor=\"palegreen\""));
        assert!(dot.contains("n000002 pruned (ins r0)"));
        assert!(dot.contains("r4: priority -> 0.3"));
        assert!(dot.contains("pruned r5: dominated"));
        assert!(dot.contains("fillcolor=\"lightgray\""));
        assert!(dot.contains("  n000000 -> n000001;\n"));
        assert!(dot.contains("  n000000 -> n000002;\n"));
        // Deterministic output.
        assert_eq!(dot, export_tree(&state, ExportFormat::GraphDot));
    }

    #[test]
    fn structured_export_lists_nodes_in_id_order() {
        let state = sample_state();
        let text = export_tree(&state, ExportFormat::Structured);
        let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
        let nodes = doc["nodes"].as_array().unwrap();
        assert_eq!(nodes.len(), 3);
        assert_eq!(nodes[0]["id"], "n000000");
        assert_eq!(nodes[1]["id"], "n000001");
        assert_eq!(nodes[1]["status"], "closed");
        assert_eq!(nodes[2]["status"], "pruned");
        assert_eq!(nodes[2]["pruned_rationale"], "dominated");
        assert_eq!(doc["root_id"], "n000000");
    }

    #[test]
    fn empty_state_exports_root_only() {
        let state = SearchState::new("objective", 5);
        let dot = export_tree(&state, ExportFormat::GraphDot);
        assert!(dot.contains("n000000 closed"));
        assert!(!dot.contains("->"));
    }

    #[test]
    fn clip_respects_char_boundaries() {
        assert_eq!(clip("short", 10), "short");
        let clipped = clip(&"é".repeat(40), 9);
        assert!(clipped.ends_with("..."));
        assert_eq!(clip(&"x".repeat(10), 4), "xxxx...");
    }
}
