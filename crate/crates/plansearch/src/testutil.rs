//! Shared fixtures for unit tests.

use std::collections::BTreeMap;

use crate::eval::landscape::{DirectiveSpec, InteractionSpec, Landscape};
use crate::task::{EvaluatorConfig, FileSpec, LandscapeSource, Task, Workload};

/// The example landscape used throughout tests: tile_a helps alone,
/// layout_swizzle hurts alone, vectorize needs layout_swizzle and pays off
/// only jointly with it. Base latencies are twice the reference latencies on
/// both workloads, so both workloads score identically for any directive set.
pub fn demo_landscape() -> Landscape {
    Landscape {
        base_us: [("w_small".to_owned(), 1000.0), ("w_large".to_owned(), 2000.0)]
            .into_iter()
            .collect(),
        directives: vec![
            DirectiveSpec {
                name: "tile_a".to_owned(),
                factor: 0.8,
                requires: vec![],
            },
            DirectiveSpec {
                name: "layout_swizzle".to_owned(),
                factor: 1.05,
                requires: vec![],
            },
            DirectiveSpec {
                name: "vectorize".to_owned(),
                factor: 1.0,
                requires: vec!["layout_swizzle".to_owned()],
            },
        ],
        interactions: vec![InteractionSpec {
            directives: vec!["layout_swizzle".to_owned(), "vectorize".to_owned()],
            factor: 0.5,
        }],
    }
}

/// A fully resolved task over [`demo_landscape`].
pub fn demo_task() -> Task {
    Task {
        task_id: "demo".to_owned(),
        objective_text: "Minimize kernel latency across the workload suite.".to_owned(),
        reference_impl: "for (i = 0; i < n; i++) out[i] = a[i] * b[i];".to_owned(),
        instructions: "Output a directive list.".to_owned(),
        file_manifest: vec![FileSpec {
            name: "directives.txt".to_owned(),
            description: "One optimization directive per line.".to_owned(),
        }],
        workloads: vec![
            Workload {
                workload_id: "w_small".to_owned(),
                parameters: [("n".to_owned(), serde_json::json!(1024))].into_iter().collect(),
                p_ref_us: 500.0,
            },
            Workload {
                workload_id: "w_large".to_owned(),
                parameters: [("n".to_owned(), serde_json::json!(1048576))]
                    .into_iter()
                    .collect(),
                p_ref_us: 1000.0,
            },
        ],
        evaluator: EvaluatorConfig::SyntheticLandscape {
            landscape: LandscapeSource::Inline(demo_landscape()),
            determinism_seed: None,
        },
        initial_program: None,
        source_path: None,
    }
}

/// Reference latencies of [`demo_task`] keyed by workload.
pub fn demo_p_refs() -> BTreeMap<String, f64> {
    demo_task()
        .workloads
        .iter()
        .map(|w| (w.workload_id.clone(), w.p_ref_us))
        .collect()
}
