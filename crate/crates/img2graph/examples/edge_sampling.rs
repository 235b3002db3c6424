//! Ratio-regularized relation sampling versus a fixed background budget.
//!
//! Dense all-pairs supervision drowns the few real edges in background
//! pairs; the regularized sampler rebalances every batch to a target ratio
//! r = |active| / |background| by subsampling or duplicating.

use img2graph::data::{gen_synthetic, SynthStyle};
use img2graph::sampling::{enumerate_edges, fixed_budget_sample, regularized_sample};

fn main() {
    let graphs: Vec<_> = gen_synthetic(3, 4, 2, SynthStyle::Tree)
        .into_iter()
        .map(|s| s.graph)
        .collect();
    let (active, background) = enumerate_edges(&graphs);
    println!(
        "4 tree graphs: {} active pairs, {} background pairs (raw ratio {:.3})",
        active.len(),
        background.len(),
        active.len() as f64 / background.len() as f64,
    );

    for r in [0.05, 0.15, 0.5] {
        let set = regularized_sample(&active, &background, r, 0).unwrap();
        println!(
            "  r = {r:<4}: kept {} active / {} background, achieved {:.4}",
            set.active.len(),
            set.background.len(),
            set.achieved_ratio(),
        );
    }

    let set = fixed_budget_sample(&active, &background, active.len() + 32, 0).unwrap();
    println!(
        "  fixed budget {}: {} active / {} background (no ratio control)",
        active.len() + 32,
        set.active.len(),
        set.background.len(),
    );
}
