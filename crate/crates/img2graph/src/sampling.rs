//! Edge sampling for relation supervision.
//!
//! Relation heads are trained on a mix of *active* pairs (ground-truth edges,
//! label 1) and *background* pairs (non-edges, label 0). Background pairs
//! vastly outnumber active ones, so [`regularized_sample`] upsamples one of
//! the two multisets by cyclic duplication until their size ratio reaches a
//! target `r`; [`fixed_budget_sample`] is the conventional baseline that
//! instead draws a fixed total number of pairs.

use crate::graph::SpatialGraph;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default active/background target ratio for [`regularized_sample`].
pub const DEFAULT_RATIO: f64 = 0.15;

/// A node-index pair within one sample of a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaggedPair {
    pub sample: usize,
    /// Unordered node indices, canonical `a < b`.
    pub a: usize,
    pub b: usize,
}

impl TaggedPair {
    pub fn new(sample: usize, a: usize, b: usize) -> Self {
        TaggedPair {
            sample,
            a: a.min(b),
            b: a.max(b),
        }
    }
}

/// Active and background pair multisets with the ratio they were built for.
///
/// After [`regularized_sample`], at most one of the two multisets contains
/// duplicates and `|active| / |background|` is within `1/|background|` of
/// `ratio_target` (when both are non-empty).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeSampleSet {
    pub active: Vec<TaggedPair>,
    pub background: Vec<TaggedPair>,
    pub ratio_target: f64,
}

impl EdgeSampleSet {
    /// `|active| / |background|`; infinite when background is empty.
    pub fn achieved_ratio(&self) -> f64 {
        self.active.len() as f64 / self.background.len() as f64
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SamplingError {
    #[error("ratio r must lie in (0,1], got {0}")]
    BadRatio(f64),
    #[error("budget {budget} is smaller than the active count {active}; all active pairs must fit")]
    BudgetTooSmall { budget: usize, active: usize },
}

/// Splits each graph's unordered node pairs into its edge set (active) and
/// the within-sample complement (background). No pair ever mixes samples.
pub fn enumerate_edges(graphs: &[SpatialGraph]) -> (Vec<TaggedPair>, Vec<TaggedPair>) {
    let mut active = Vec::new();
    let mut background = Vec::new();
    for (s, g) in graphs.iter().enumerate() {
        let edge_set: std::collections::HashSet<(usize, usize)> =
            g.edges.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
        for &(a, b) in &g.edges {
            active.push(TaggedPair::new(s, a, b));
        }
        for a in 0..g.nodes.len() {
            for b in a + 1..g.nodes.len() {
                if !edge_set.contains(&(a, b)) {
                    background.push(TaggedPair::new(s, a, b));
                }
            }
        }
    }
    (active, background)
}

/// Number of integers `i` with `lower <= i < bound` for a real-valued
/// `bound`, i.e. the padded multiset size implied by an index range. Values
/// within fp noise of an integer are treated as that integer.
fn padded_size(lower: usize, bound: f64) -> usize {
    let nearest = bound.round();
    let effective = if (bound - nearest).abs() < 1e-9 * nearest.abs().max(1.0) {
        nearest
    } else {
        bound.ceil()
    };
    (effective as usize).max(lower)
}

fn upsample(base: &[TaggedPair], target: usize, seed: u64) -> Vec<TaggedPair> {
    let mut shuffled = base.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let mut out = base.to_vec();
    for i in base.len()..target {
        out.push(shuffled[i % base.len()]);
    }
    out
}

/// Ratio-regularized sampling: pads the smaller side by seeded cyclic
/// duplication until `|active| / |background|` reaches `r` up to rounding.
///
/// If `|background| * r > |active|`, active pairs are duplicated (background
/// untouched); else if `|active| / r > |background|`, background pairs are
/// duplicated. At most one branch fires; when the ratio already holds, both
/// lists pass through unchanged. Upsampling duplicates existing elements
/// only, so the distinct sets are preserved exactly.
pub fn regularized_sample(
    active: &[TaggedPair],
    background: &[TaggedPair],
    r: f64,
    seed: u64,
) -> Result<EdgeSampleSet, SamplingError> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(SamplingError::BadRatio(r));
    }
    if active.is_empty() || background.is_empty() {
        // Nothing can be duplicated toward a ratio; pass through.
        return Ok(EdgeSampleSet {
            active: active.to_vec(),
            background: background.to_vec(),
            ratio_target: r,
        });
    }
    let active_target = padded_size(active.len(), background.len() as f64 * r);
    if active_target > active.len() {
        return Ok(EdgeSampleSet {
            active: upsample(active, active_target, seed),
            background: background.to_vec(),
            ratio_target: r,
        });
    }
    let background_target = padded_size(background.len(), active.len() as f64 / r);
    if background_target > background.len() {
        return Ok(EdgeSampleSet {
            active: active.to_vec(),
            background: upsample(background, background_target, seed),
            ratio_target: r,
        });
    }
    Ok(EdgeSampleSet {
        active: active.to_vec(),
        background: background.to_vec(),
        ratio_target: r,
    })
}

/// Fixed-budget baseline: keeps every active pair and draws
/// `min(budget - |active|, |background|)` background pairs uniformly without
/// replacement (seeded). Errors when the budget cannot hold all active pairs.
pub fn fixed_budget_sample(
    active: &[TaggedPair],
    background: &[TaggedPair],
    budget: usize,
    seed: u64,
) -> Result<EdgeSampleSet, SamplingError> {
    if budget < active.len() {
        return Err(SamplingError::BudgetTooSmall {
            budget,
            active: active.len(),
        });
    }
    let take = (budget - active.len()).min(background.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = background.to_vec();
    pool.shuffle(&mut rng);
    pool.truncate(take);
    let ratio = if pool.is_empty() {
        1.0
    } else {
        active.len() as f64 / pool.len() as f64
    };
    Ok(EdgeSampleSet {
        active: active.to_vec(),
        background: pool,
        ratio_target: ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SpatialGraph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn path_graph() -> SpatialGraph {
        SpatialGraph::new(
            2,
            vec![vec![0.1, 0.5], vec![0.5, 0.5], vec![0.9, 0.5]],
            vec![(0, 1), (1, 2)],
        )
    }

    fn pairs(n: usize) -> Vec<TaggedPair> {
        (0..n).map(|i| TaggedPair::new(0, i, i + 1)).collect()
    }

    #[test]
    fn triangle_has_no_background() {
        let g = SpatialGraph::new(
            2,
            vec![vec![0.1, 0.1], vec![0.9, 0.1], vec![0.5, 0.9]],
            vec![(0, 1), (0, 2), (1, 2)],
        );
        let (active, background) = enumerate_edges(&[g]);
        assert_eq!(active.len(), 3);
        assert!(background.is_empty());
    }

    #[test]
    fn path_complement_is_single_pair() {
        let (active, background) = enumerate_edges(&[path_graph()]);
        assert_eq!(active.len(), 2);
        assert_eq!(background, vec![TaggedPair::new(0, 0, 2)]);
    }

    #[test]
    fn batch_pairs_never_mix_samples() {
        let (active, background) = enumerate_edges(&[path_graph(), path_graph()]);
        assert_eq!(active.len(), 4);
        assert_eq!(background.len(), 2);
        // Oracle: per-sample brute-force enumeration.
        for s in 0..2 {
            let from_sample: Vec<_> = background.iter().filter(|p| p.sample == s).collect();
            assert_eq!(from_sample.len(), 1);
            assert_eq!((from_sample[0].a, from_sample[0].b), (0, 2));
        }
        for p in active.iter().chain(&background) {
            assert!(p.sample < 2);
        }
    }

    #[test]
    fn upsamples_active_to_exact_ratio() {
        // 3 active, 100 background, r = 0.15: indices 3..15 pad active to 15.
        let set = regularized_sample(&pairs(3), &pairs(100), 0.15, 7).unwrap();
        assert_eq!(set.active.len(), 15);
        assert_eq!(set.background.len(), 100);
        assert!((set.achieved_ratio() - 0.15).abs() < 1e-12);
    }

    #[test]
    fn upsamples_background_when_active_heavy() {
        // 50 active, 100 background, r = 0.15: indices 100..334 pad background.
        let set = regularized_sample(&pairs(50), &pairs(100), 0.15, 7).unwrap();
        assert_eq!(set.active.len(), 50);
        assert_eq!(set.background.len(), 334);
        assert!((set.achieved_ratio() - 50.0 / 334.0).abs() < 1e-12);
    }

    #[test]
    fn ratio_already_met_passes_through() {
        let set = regularized_sample(&pairs(15), &pairs(100), 0.15, 7).unwrap();
        assert_eq!(set.active.len(), 15);
        assert_eq!(set.background.len(), 100);
    }

    #[test]
    fn rejects_bad_ratio() {
        assert_eq!(
            regularized_sample(&pairs(3), &pairs(5), 0.0, 0).unwrap_err(),
            SamplingError::BadRatio(0.0)
        );
        assert!(regularized_sample(&pairs(3), &pairs(5), 1.5, 0).is_err());
    }

    #[test]
    fn empty_inputs_pass_through() {
        let set = regularized_sample(&[], &[], 0.15, 0).unwrap();
        assert!(set.active.is_empty() && set.background.is_empty());
        let set = regularized_sample(&[], &pairs(10), 0.15, 0).unwrap();
        assert!(set.active.is_empty());
        assert_eq!(set.background.len(), 10);
    }

    #[test]
    fn ratio_attained_within_rounding_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let na = rng.random_range(1..200);
            let nb = rng.random_range(1..2000);
            let r = rng.random_range(0.05..0.8);
            let set = regularized_sample(&pairs(na), &pairs(nb), r, rng.random()).unwrap();
            let achieved = set.achieved_ratio();
            let bound = 1.0 / set.background.len() as f64;
            assert!(
                (achieved - r).abs() <= bound + 1e-12,
                "na={na} nb={nb} r={r}: achieved {achieved}"
            );
        }
    }

    #[test]
    fn duplicates_in_at_most_one_multiset() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let has_dups = |xs: &[TaggedPair]| {
            let set: HashSet<_> = xs.iter().collect();
            set.len() != xs.len()
        };
        for _ in 0..200 {
            let na = rng.random_range(1..50);
            let nb = rng.random_range(1..500);
            let r = rng.random_range(0.05..0.8);
            let set = regularized_sample(&pairs(na), &pairs(nb), r, rng.random()).unwrap();
            assert!(!(has_dups(&set.active) && has_dups(&set.background)));
        }
    }

    #[test]
    fn distinct_sets_preserved_by_upsampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let na = rng.random_range(1..40);
            let nb = rng.random_range(1..400);
            let active = pairs(na);
            let background: Vec<TaggedPair> =
                (0..nb).map(|i| TaggedPair::new(1, i, i + 1)).collect();
            let set = regularized_sample(&active, &background, 0.2, rng.random()).unwrap();
            let d = |xs: &[TaggedPair]| xs.iter().copied().collect::<HashSet<_>>();
            assert_eq!(d(&set.active), d(&active));
            assert_eq!(d(&set.background), d(&background));
        }
    }

    #[test]
    fn input_permutation_changes_only_duplicated_elements() {
        let active = pairs(4);
        let background = pairs(60);
        let a = regularized_sample(&active, &background, 0.3, 11).unwrap();
        let mut reordered = active.clone();
        reordered.reverse();
        let b = regularized_sample(&reordered, &background, 0.3, 11).unwrap();
        assert_eq!(a.active.len(), b.active.len());
        assert_eq!(a.background.len(), b.background.len());
    }

    #[test]
    fn deterministic_under_seed() {
        let set1 = regularized_sample(&pairs(3), &pairs(200), 0.15, 99).unwrap();
        let set2 = regularized_sample(&pairs(3), &pairs(200), 0.15, 99).unwrap();
        assert_eq!(set1.active, set2.active);
        assert_eq!(set1.background, set2.background);
    }

    #[test]
    fn fixed_budget_counts() {
        let set = fixed_budget_sample(&pairs(3), &pairs(100), 10, 5).unwrap();
        assert_eq!(set.active.len(), 3);
        assert_eq!(set.background.len(), 7);

        let set = fixed_budget_sample(&pairs(3), &pairs(2), 10, 5).unwrap();
        assert_eq!(set.background.len(), 2);
    }

    #[test]
    fn fixed_budget_rejects_overflow() {
        assert!(matches!(
            fixed_budget_sample(&pairs(5), &pairs(2), 3, 0),
            Err(SamplingError::BudgetTooSmall { budget: 3, active: 5 })
        ));
    }

    #[test]
    fn fixed_budget_deterministic_and_without_replacement() {
        let a = fixed_budget_sample(&pairs(3), &pairs(100), 50, 12).unwrap();
        let b = fixed_budget_sample(&pairs(3), &pairs(100), 50, 12).unwrap();
        assert_eq!(a.background, b.background);
        let distinct: HashSet<_> = a.background.iter().collect();
        assert_eq!(distinct.len(), a.background.len());
    }
}
