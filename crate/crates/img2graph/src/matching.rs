//! Bipartite matching between predicted object tokens and ground-truth
//! nodes: an exact O(n³) Hungarian solver plus the detection matching cost.
//!
//! Rectangular cost matrices are padded square with a sentinel strictly
//! larger than any achievable real assignment cost; rows assigned to padded
//! columns come back as unmatched predictions. Among equally cheap optima the
//! solver returns the lexicographically smallest pair list, which makes
//! downstream pipelines byte-reproducible.

use crate::graph::BoundingBox;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One decoded prediction batch: `N` boxes with existence probabilities and
/// one relation probability per unordered token pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionSet {
    pub boxes: Vec<BoundingBox>,
    pub cls_prob: Vec<f64>,
    pub rel_prob: Vec<RelProb>,
}

/// Relation probability for the unordered token pair `(i, j)`, `i < j`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelProb {
    pub pair: (usize, usize),
    pub prob: f64,
}

impl PredictionSet {
    /// Checks the structural invariants: probability ranges, one relation
    /// entry per unordered pair, canonical pair order.
    pub fn validate(&self) -> Result<(), MatchError> {
        let n = self.boxes.len();
        if self.cls_prob.len() != n {
            return Err(MatchError::Malformed(format!(
                "{} boxes but {} cls_prob entries",
                n,
                self.cls_prob.len()
            )));
        }
        for (i, p) in self.cls_prob.iter().enumerate() {
            if !(0.0..=1.0).contains(p) {
                return Err(MatchError::Malformed(format!(
                    "cls_prob[{i}] = {p} outside [0,1]"
                )));
            }
        }
        let expected = n * n.saturating_sub(1) / 2;
        if self.rel_prob.len() != expected {
            return Err(MatchError::Malformed(format!(
                "expected {expected} rel_prob entries for {n} tokens, got {}",
                self.rel_prob.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for r in &self.rel_prob {
            let (a, b) = r.pair;
            if a >= b || b >= n {
                return Err(MatchError::Malformed(format!(
                    "rel_prob pair ({a},{b}) not canonical for {n} tokens"
                )));
            }
            if !seen.insert(r.pair) {
                return Err(MatchError::Malformed(format!(
                    "duplicate rel_prob pair ({a},{b})"
                )));
            }
            if !(0.0..=1.0).contains(&r.prob) {
                return Err(MatchError::Malformed(format!(
                    "rel_prob ({a},{b}) = {} outside [0,1]",
                    r.prob
                )));
            }
        }
        Ok(())
    }

    /// Relation probability for `(i, j)` in either order.
    pub fn relation(&self, i: usize, j: usize) -> Option<f64> {
        let key = (i.min(j), i.max(j));
        self.rel_prob.iter().find(|r| r.pair == key).map(|r| r.prob)
    }
}

/// Result of assigning predictions (rows) to ground-truth entries (columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    /// `(prediction index, ground-truth index)` sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    /// Predictions left without a ground-truth partner, ascending.
    pub unmatched_pred: Vec<usize>,
}

impl Matching {
    /// Ground-truth index matched to prediction `i`, if any.
    pub fn gt_of_pred(&self, i: usize) -> Option<usize> {
        self.pairs
            .iter()
            .find(|&&(p, _)| p == i)
            .map(|&(_, g)| g)
    }

    /// Prediction index matched to ground-truth `j`, if any.
    pub fn pred_of_gt(&self, j: usize) -> Option<usize> {
        self.pairs
            .iter()
            .find(|&&(_, g)| g == j)
            .map(|&(p, _)| p)
    }
}

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("cost matrix entry ({row},{col}) is not finite")]
    NonFiniteCost { row: usize, col: usize },
    #[error("ragged cost matrix: row {row} has {got} entries, expected {expected}")]
    Ragged {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("malformed prediction set: {0}")]
    Malformed(String),
}

/// Weights of the three matching-cost terms.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MatchWeights {
    pub reg: f64,
    pub giou: f64,
    pub cls: f64,
}

impl MatchWeights {
    /// Defaults mirror the combined-loss coefficients for the given
    /// dimensionality.
    pub fn for_dims(dims: usize) -> Self {
        if dims == 3 {
            MatchWeights {
                reg: 2.0,
                giou: 3.0,
                cls: 4.0,
            }
        } else {
            MatchWeights {
                reg: 5.0,
                giou: 2.0,
                cls: 3.0,
            }
        }
    }
}

/// Cost of pairing one predicted box (with existence probability
/// `cls_prob`) against one ground-truth box:
/// `reg * L1(centers, extents) + giou * (1 - gIoU) + cls * (1 - cls_prob)`.
pub fn match_cost(
    pred_box: &BoundingBox,
    cls_prob: f64,
    gt_box: &BoundingBox,
    w: &MatchWeights,
) -> f64 {
    let l1: f64 = pred_box
        .center
        .iter()
        .zip(&gt_box.center)
        .map(|(a, b)| (a - b).abs())
        .chain(
            pred_box
                .extent
                .iter()
                .zip(&gt_box.extent)
                .map(|(a, b)| (a - b).abs()),
        )
        .sum();
    w.reg * l1 + w.giou * (1.0 - pred_box.giou(gt_box)) + w.cls * (1.0 - cls_prob)
}

/// Full prediction × ground-truth cost matrix for [`hungarian`].
pub fn cost_matrix(
    preds: &PredictionSet,
    gt_boxes: &[BoundingBox],
    w: &MatchWeights,
) -> Vec<Vec<f64>> {
    preds
        .boxes
        .iter()
        .zip(&preds.cls_prob)
        .map(|(pb, &cp)| {
            gt_boxes
                .iter()
                .map(|gb| match_cost(pb, cp, gb, w))
                .collect()
        })
        .collect()
}

/// Minimum-cost assignment of `min(n, m)` prediction/ground-truth pairs.
///
/// Ties between optimal assignments resolve to the lexicographically
/// smallest pair list. Empty inputs yield an empty matching.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Matching, MatchError> {
    let n = cost.len();
    let m = if n == 0 { 0 } else { cost[0].len() };
    for (i, row) in cost.iter().enumerate() {
        if row.len() != m {
            return Err(MatchError::Ragged {
                row: i,
                got: row.len(),
                expected: m,
            });
        }
        for (j, &c) in row.iter().enumerate() {
            if !c.is_finite() {
                return Err(MatchError::NonFiniteCost { row: i, col: j });
            }
        }
    }
    if n == 0 || m == 0 {
        return Ok(Matching {
            pairs: Vec::new(),
            unmatched_pred: (0..n).collect(),
        });
    }

    // Pad to square. The sentinel exceeds any achievable real assignment
    // cost, so padded cells never displace a feasible real pairing.
    let s = n.max(m);
    let max_abs = cost
        .iter()
        .flatten()
        .fold(0.0_f64, |acc, &c| acc.max(c.abs()));
    let sentinel = max_abs * (s as f64 + 1.0) + 1.0;
    let a: Vec<Vec<f64>> = (0..s)
        .map(|i| {
            (0..s)
                .map(|j| {
                    if i < n && j < m {
                        cost[i][j]
                    } else {
                        sentinel
                    }
                })
                .collect()
        })
        .collect();

    let (row_to_col, u, v) = solve_square(&a);

    // Complementary slackness: every optimal assignment uses only edges whose
    // reduced cost is zero, and every perfect matching over those edges is
    // optimal. Refine to the lexicographically smallest one.
    let tol = 1e-9 * (1.0 + max_abs + sentinel.abs());
    let mut tight: Vec<Vec<usize>> = (0..s)
        .map(|i| {
            (0..s)
                .filter(|&j| (a[i][j] - u[i] - v[j]).abs() <= tol || row_to_col[i] == j)
                .collect()
        })
        .collect();
    for row in &mut tight {
        row.sort_unstable();
    }
    let row_to_col = lex_smallest_perfect_matching(&tight, row_to_col, m);

    let mut pairs = Vec::new();
    let mut unmatched = Vec::new();
    for (i, &j) in row_to_col.iter().enumerate().take(n) {
        if j < m {
            pairs.push((i, j));
        } else {
            unmatched.push(i);
        }
    }
    Ok(Matching {
        pairs,
        unmatched_pred: unmatched,
    })
}

/// Jonker-Volgenant style shortest augmenting path with potentials.
/// Returns (row -> col assignment, row potentials, col potentials).
fn solve_square(a: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = a.len();
    // Index n serves as the virtual column / "free" marker.
    let mut u = vec![0.0_f64; n + 1];
    let mut v = vec![0.0_f64; n + 1];
    let mut p = vec![n; n + 1]; // p[j] = row currently matched to column j
    let mut way = vec![0_usize; n + 1];
    for i in 0..n {
        p[n] = i;
        let mut j0 = n;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = n;
            for j in 0..n {
                if !used[j] {
                    let cur = a[i0][j] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == n {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == n {
                break;
            }
        }
    }
    let mut row_to_col = vec![n; n];
    for j in 0..n {
        if p[j] < n {
            row_to_col[p[j]] = j;
        }
    }
    (row_to_col, u[..n].to_vec(), v[..n].to_vec())
}

/// Given the bipartite graph of optimal ("tight") edges and one perfect
/// matching in it, fixes rows in ascending order to their smallest feasible
/// column. Columns `>= m_real` are padding, i.e. "unmatched": a real column
/// is always lexicographically preferable for the emitted pair list, so real
/// candidates are tried first.
fn lex_smallest_perfect_matching(
    tight: &[Vec<usize>],
    initial: Vec<usize>,
    m_real: usize,
) -> Vec<usize> {
    let s = tight.len();
    let mut row_of_col = vec![usize::MAX; s];
    let mut col_of_row = initial;
    for (i, &j) in col_of_row.iter().enumerate() {
        row_of_col[j] = i;
    }
    for i in 0..s {
        for &j in &tight[i] {
            if j >= m_real {
                break; // only padding (= unmatched) beyond here; keep current state
            }
            if col_of_row[i] == j {
                break; // current match already the smallest feasible choice
            }
            if col_of_row[i] < m_real && j > col_of_row[i] {
                break; // current real match is lex-smaller than everything left
            }
            let owner = row_of_col[j];
            debug_assert!(owner != i);
            if owner != usize::MAX && owner < i {
                continue; // column fixed by an earlier row
            }
            // Tentatively steal column j for row i and try to rehome `owner`.
            let freed = col_of_row[i];
            row_of_col[freed] = usize::MAX;
            col_of_row[i] = j;
            row_of_col[j] = i;
            if owner == usize::MAX {
                break;
            }
            col_of_row[owner] = usize::MAX;
            let mut visited = vec![false; s];
            visited[j] = true;
            if augment(owner, tight, &mut row_of_col, &mut col_of_row, &mut visited, i) {
                break;
            }
            // Revert.
            col_of_row[owner] = j;
            row_of_col[j] = owner;
            col_of_row[i] = freed;
            row_of_col[freed] = i;
        }
    }
    col_of_row
}

/// Kuhn augmenting step over tight edges; columns owned by rows `< fixed_up_to`
/// are frozen and cannot be reassigned.
fn augment(
    row: usize,
    tight: &[Vec<usize>],
    row_of_col: &mut [usize],
    col_of_row: &mut [usize],
    visited: &mut [bool],
    fixed_up_to: usize,
) -> bool {
    for &j in &tight[row] {
        if visited[j] {
            continue;
        }
        visited[j] = true;
        let owner = row_of_col[j];
        if owner != usize::MAX && owner < fixed_up_to {
            continue;
        }
        if owner == usize::MAX
            || augment(owner, tight, row_of_col, col_of_row, visited, fixed_up_to)
        {
            row_of_col[j] = row;
            col_of_row[row] = j;
            return true;
        }
    }
    false
}
