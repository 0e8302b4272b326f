//! Seeded random landscape generation for benchmarking the search.
//!
//! Every generated landscape embeds one guaranteed non-monotonic path: a
//! directive `a` that alone slows the kernel down, and a directive `b`
//! requiring `a` whose interaction with it more than pays the cost back.
//! Greedy hill-climbing stalls on such pairs; tree search should not.

use anyhow::{bail, Result};
use plansearch::eval::landscape::{DirectiveSpec, InteractionSpec, Landscape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Name pool for the first directives; overflow gets `opt_{i}`.
const NAME_POOL: &[&str] = &[
    "tile", "vectorize", "unroll", "fuse", "swizzle", "prefetch", "pipeline",
    "coalesce", "inline_pack", "block", "reorder", "pad", "cache_stage",
    "split_k", "hoist", "remap",
];

/// Enumeration of all subsets backs the oracle sidecar; keep it cheap.
pub const MAX_DIRECTIVES: usize = 16;

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Generates a validated landscape from `(directives, seed)`, fully
/// deterministic. Factors are rounded to three decimals so the written
/// TOML stays readable while round-tripping exactly.
pub fn generate(directives: usize, seed: u64) -> Result<Landscape> {
    if directives < 2 {
        bail!("a landscape needs at least 2 directives, got {directives}");
    }
    if directives > MAX_DIRECTIVES {
        bail!("at most {MAX_DIRECTIVES} directives are supported, got {directives}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let names: Vec<String> = (0..directives)
        .map(|i| match NAME_POOL.get(i) {
            Some(n) => (*n).to_owned(),
            None => format!("opt_{i}"),
        })
        .collect();

    let mut specs: Vec<DirectiveSpec> = Vec::with_capacity(directives);
    for (i, name) in names.iter().enumerate() {
        let factor = round3(rng.random_range(0.70..1.20));
        // Requirement edges point at earlier directives only: acyclic by
        // construction.
        let requires = if i > 0 && rng.random_bool(0.35) {
            vec![names[rng.random_range(0..i)].clone()]
        } else {
            Vec::new()
        };
        specs.push(DirectiveSpec {
            name: name.clone(),
            factor,
            requires,
        });
    }

    // Inject the non-monotonic pair: `a` alone regresses (factor > 1),
    // `b` requires `a`, and their interaction factor makes the pair a
    // strict improvement over doing nothing.
    let a = rng.random_range(0..directives);
    let b = (a + 1 + rng.random_range(0..directives - 1)) % directives;
    specs[a].factor = round3(rng.random_range(1.01..1.15));
    specs[a].requires = Vec::new();
    specs[b].factor = round3(rng.random_range(0.95..1.05));
    specs[b].requires = vec![names[a].clone()];
    let interactions = vec![InteractionSpec {
        directives: vec![names[a].clone(), names[b].clone()],
        factor: round3(rng.random_range(0.40..0.60)),
    }];

    let mut base_us = BTreeMap::new();
    base_us.insert("w_small".to_owned(), round1(rng.random_range(500.0..2000.0)));
    base_us.insert(
        "w_large".to_owned(),
        round1(rng.random_range(2000.0..8000.0)),
    );

    let landscape = Landscape {
        base_us,
        directives: specs,
        interactions,
    };
    landscape
        .validate()
        .map_err(|e| anyhow::anyhow!("generated landscape failed validation: {e}"))?;
    Ok(landscape)
}
