//! Graph evaluation suite: street-mover distance, topology
//! precision/recall, and node/edge mAP/mAR over synthesized boxes.
//!
//! Aggregation order is fixed (sample index), so reports are deterministic
//! byte for byte.

use crate::graph::{dist, BoundingBox, SpatialGraph};
use crate::matching::hungarian;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BinaryHeap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("topology metrics support 2D graphs only, got {0}D")]
    UnsupportedDims(usize),
    #[error("{0} predictions but {1} ground-truth samples")]
    LengthMismatch(usize, usize),
    #[error("scored graph malformed: {0}")]
    Malformed(String),
    #[error("assignment failed: {0}")]
    Assignment(String),
}

/// Defaults for [`MetricConfig`].
pub const DEFAULT_SMD_POINTS: usize = 100;
pub const DEFAULT_NODE_BOX_HALF: f64 = 0.03125;
pub const DEFAULT_EDGE_MIN_EXTENT: f64 = 0.0625;

/// Topology metric parameters, in normalized units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopoConfig {
    /// Arc-length spacing between consecutive points on an edge.
    pub hole_spacing: f64,
    /// Maximum distance for a marble-hole match.
    pub match_radius: f64,
    /// Arc-length spacing between crawl seeds.
    pub seed_interval: f64,
    /// Geodesic radius of the subgraph crawled from each seed.
    pub crawl_radius: f64,
}

impl Default for TopoConfig {
    fn default() -> Self {
        TopoConfig {
            hole_spacing: 0.05,
            match_radius: 0.025,
            seed_interval: 0.25,
            crawl_radius: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub smd_points: usize,
    pub smd_seed: u64,
    pub node_box_half: f64,
    pub edge_min_extent: f64,
    /// IoU thresholds for mAP/mAR, evaluated in the given order.
    pub iou_thresholds: Vec<f64>,
    pub topo: TopoConfig,
}

/// The standard threshold range 0.50:0.05:0.95.
pub fn iou_threshold_range() -> Vec<f64> {
    (0..10).map(|k| 0.5 + 0.05 * k as f64).collect()
}

/// Two-point threshold set {0.5, 0.95}.
pub fn iou_threshold_two_point() -> Vec<f64> {
    vec![0.5, 0.95]
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            smd_points: DEFAULT_SMD_POINTS,
            smd_seed: 0,
            node_box_half: DEFAULT_NODE_BOX_HALF,
            edge_min_extent: DEFAULT_EDGE_MIN_EXTENT,
            iou_thresholds: iou_threshold_range(),
            topo: TopoConfig::default(),
        }
    }
}

// ---------------------------------------------------------------------------
// Street-mover distance
// ---------------------------------------------------------------------------

/// Uniform arc-length stratified point sample along a graph's edges. A graph
/// without edges cycles its node set; a graph without nodes yields nothing.
/// This is the point set [`smd`] compares, exposed so external checks can
/// reproduce its transport cost independently.
pub fn sample_along(g: &SpatialGraph, n: usize, seed: u64) -> Option<Vec<Vec<f64>>> {
    if n == 0 {
        return Some(Vec::new());
    }
    if g.edges.is_empty() {
        if g.nodes.is_empty() {
            return None;
        }
        return Some((0..n).map(|k| g.nodes[k % g.nodes.len()].clone()).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = g.total_edge_length();
    let lengths: Vec<f64> = g
        .edges
        .iter()
        .map(|&(a, b)| dist(&g.nodes[a], &g.nodes[b]))
        .collect();
    if total <= 0.0 {
        // Degenerate: all edges zero length; every point sits on a node.
        let (a, _) = g.edges[0];
        return Some(vec![g.nodes[a].clone(); n]);
    }
    let mut points = Vec::with_capacity(n);
    let mut edge = 0;
    let mut consumed = 0.0;
    for k in 0..n {
        let u: f64 = rng.random_range(0.0..1.0);
        let s = (k as f64 + u) / n as f64 * total;
        while edge + 1 < g.edges.len() && consumed + lengths[edge] < s {
            consumed += lengths[edge];
            edge += 1;
        }
        let t = if lengths[edge] > 0.0 {
            ((s - consumed) / lengths[edge]).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (a, b) = g.edges[edge];
        let p: Vec<f64> = g.nodes[a]
            .iter()
            .zip(&g.nodes[b])
            .map(|(&pa, &pb)| pa + t * (pb - pa))
            .collect();
        points.push(p);
    }
    Some(points)
}

/// Street-mover distance: mean squared-Euclidean cost of the optimal
/// assignment between equal-size point sets sampled along each graph.
///
/// Both graphs sample from independent streams of the same seed, so
/// `smd(g, g)` is exactly 0 and swapping the arguments changes nothing.
/// Conventions: both graphs empty → 0; exactly one empty → `dims` (the
/// squared diameter of the unit cube) as a sentinel.
pub fn smd(
    pred: &SpatialGraph,
    gt: &SpatialGraph,
    n_points: usize,
    seed: u64,
) -> Result<f64, MetricError> {
    let p = sample_along(pred, n_points, seed);
    let q = sample_along(gt, n_points, seed);
    match (p, q) {
        (None, None) => Ok(0.0),
        (None, Some(_)) | (Some(_), None) => Ok(pred.dims.max(gt.dims) as f64),
        (Some(p), Some(q)) => {
            if p.is_empty() {
                return Ok(0.0);
            }
            let cost: Vec<Vec<f64>> = p
                .iter()
                .map(|a| q.iter().map(|b| dist(a, b).powi(2)).collect())
                .collect();
            let m = hungarian(&cost).map_err(|e| MetricError::Assignment(e.to_string()))?;
            let total: f64 = m.pairs.iter().map(|&(i, j)| cost[i][j]).sum();
            Ok(total / p.len() as f64)
        }
    }
}

// ---------------------------------------------------------------------------
// Topology precision/recall
// ---------------------------------------------------------------------------

/// Deterministic point placement for the topology metric: points every
/// `hole_spacing` of arc length on each edge, restricted to the union of
/// radius-bounded geodesic crawls started from seeds spaced `seed_interval`
/// apart along the graph. Each connected component gets at least one seed.
fn topo_points(g: &SpatialGraph, cfg: &TopoConfig) -> Vec<Vec<f64>> {
    if g.edges.is_empty() {
        return Vec::new();
    }
    let lengths: Vec<f64> = g
        .edges
        .iter()
        .map(|&(a, b)| dist(&g.nodes[a], &g.nodes[b]))
        .collect();

    // Candidate points per edge: arc positions (m + 0.5) * spacing.
    let point_pos = |m: usize| -> f64 { (m as f64 + 0.5) * cfg.hole_spacing };

    // Seeds along the whole graph: arc positions 0, si, 2si, ... over the
    // concatenated edge list, walked per connected component so every
    // component owns the start of its own arc.
    let n = g.nodes.len();
    let mut component = vec![usize::MAX; n];
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n]; // (neighbor, edge idx)
    for (e, &(a, b)) in g.edges.iter().enumerate() {
        adj[a].push((b, e));
        adj[b].push((a, e));
    }
    let mut n_components = 0;
    for start in 0..n {
        if component[start] != usize::MAX || adj[start].is_empty() {
            continue;
        }
        let mut stack = vec![start];
        component[start] = n_components;
        while let Some(x) = stack.pop() {
            for &(y, _) in &adj[x] {
                if component[y] == usize::MAX {
                    component[y] = n_components;
                    stack.push(y);
                }
            }
        }
        n_components += 1;
    }

    // Seed positions as (edge, t in [0,1]).
    let mut seeds: Vec<(usize, f64)> = Vec::new();
    for comp in 0..n_components {
        let mut walked = 0.0;
        let mut next_seed = 0.0;
        for (e, &(a, _)) in g.edges.iter().enumerate() {
            if component[a] != comp {
                continue;
            }
            while next_seed <= walked + lengths[e] {
                let t = if lengths[e] > 0.0 {
                    ((next_seed - walked) / lengths[e]).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                seeds.push((e, t));
                next_seed += cfg.seed_interval;
            }
            walked += lengths[e];
        }
    }

    // For each seed, Dijkstra over nodes, then collect reachable points.
    let mut kept: BTreeSet<(usize, usize)> = BTreeSet::new();
    for &(se, st) in &seeds {
        let (sa, sb) = g.edges[se];
        let seed_arc = st * lengths[se];
        let mut node_dist = vec![f64::INFINITY; n];
        let mut heap: BinaryHeap<(std::cmp::Reverse<u64>, usize)> = BinaryHeap::new();
        let push = |heap: &mut BinaryHeap<(std::cmp::Reverse<u64>, usize)>,
                        node_dist: &mut Vec<f64>,
                        v: usize,
                        d: f64| {
            if d <= cfg.crawl_radius && d < node_dist[v] {
                node_dist[v] = d;
                heap.push((std::cmp::Reverse(d.to_bits()), v));
            }
        };
        push(&mut heap, &mut node_dist, sa, seed_arc);
        push(&mut heap, &mut node_dist, sb, lengths[se] - seed_arc);
        while let Some((std::cmp::Reverse(bits), v)) = heap.pop() {
            let d = f64::from_bits(bits);
            if d > node_dist[v] {
                continue;
            }
            for &(w, e) in &adj[v] {
                push(&mut heap, &mut node_dist, w, d + lengths[e]);
            }
        }
        for (e, &(a, b)) in g.edges.iter().enumerate() {
            let mut m = 0;
            loop {
                let pos = point_pos(m);
                if pos > lengths[e] {
                    break;
                }
                let mut d = f64::INFINITY;
                if e == se {
                    d = (pos - seed_arc).abs();
                }
                d = d
                    .min(node_dist[a] + pos)
                    .min(node_dist[b] + lengths[e] - pos);
                if d <= cfg.crawl_radius {
                    kept.insert((e, m));
                }
                m += 1;
            }
        }
    }

    kept.into_iter()
        .map(|(e, m)| {
            let (a, b) = g.edges[e];
            let t = if lengths[e] > 0.0 {
                (point_pos(m) / lengths[e]).clamp(0.0, 1.0)
            } else {
                0.0
            };
            g.nodes[a]
                .iter()
                .zip(&g.nodes[b])
                .map(|(&pa, &pb)| pa + t * (pb - pa))
                .collect()
        })
        .collect()
}

/// Topology precision/recall: marble points placed along the prediction,
/// hole points along the ground truth (both via [`topo_points`]), matched
/// greedily one-to-one by ascending distance within `match_radius`.
/// 2D only.
pub fn topo(
    pred: &SpatialGraph,
    gt: &SpatialGraph,
    cfg: &TopoConfig,
) -> Result<(f64, f64), MetricError> {
    if pred.dims != 2 || gt.dims != 2 {
        return Err(MetricError::UnsupportedDims(pred.dims.max(gt.dims)));
    }
    let marbles = topo_points(pred, cfg);
    let holes = topo_points(gt, cfg);
    if marbles.is_empty() || holes.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, m) in marbles.iter().enumerate() {
        for (j, h) in holes.iter().enumerate() {
            let d = dist(m, h);
            if d <= cfg.match_radius {
                candidates.push((d, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut marble_used = vec![false; marbles.len()];
    let mut hole_used = vec![false; holes.len()];
    let mut matched = 0usize;
    for (_, i, j) in candidates {
        if !marble_used[i] && !hole_used[j] {
            marble_used[i] = true;
            hole_used[j] = true;
            matched += 1;
        }
    }
    Ok((
        matched as f64 / marbles.len() as f64,
        matched as f64 / holes.len() as f64,
    ))
}

// ---------------------------------------------------------------------------
// Box synthesis and mAP/mAR
// ---------------------------------------------------------------------------

/// A fixed-size box around each node, clipped to the unit cube.
pub fn node_boxes(g: &SpatialGraph, node_box_half: f64) -> Vec<BoundingBox> {
    assert!(node_box_half > 0.0);
    g.nodes
        .iter()
        .map(|n| {
            BoundingBox::new(n.clone(), vec![node_box_half; g.dims]).clip_to_unit()
        })
        .collect()
}

/// The endpoint bounding box of each edge, every full extent raised to at
/// least `min_extent` by centered inflation, clipped to the unit cube.
pub fn edge_boxes(g: &SpatialGraph, min_extent: f64) -> Vec<BoundingBox> {
    assert!(min_extent > 0.0);
    g.edges
        .iter()
        .map(|&(a, b)| {
            let (na, nb) = (&g.nodes[a], &g.nodes[b]);
            let center: Vec<f64> = na.iter().zip(nb).map(|(x, y)| 0.5 * (x + y)).collect();
            let extent: Vec<f64> = na
                .iter()
                .zip(nb)
                .map(|(x, y)| (0.5 * (x - y).abs()).max(min_extent / 2.0))
                .collect();
            BoundingBox::new(center, extent).clip_to_unit()
        })
        .collect()
}

/// One evaluation unit: scored predicted boxes plus ground-truth boxes.
/// Matching never crosses units; ranking pools across them.
pub type ScoredBoxes<'a> = (&'a [(BoundingBox, f64)], &'a [BoundingBox]);

/// Greedy matching at one IoU threshold over pooled samples. Returns
/// per-rank hit flags (pooled, ordered by score descending with ties by
/// sample then index) and the total ground-truth count.
fn match_at_threshold(samples: &[ScoredBoxes], t: f64) -> (Vec<bool>, usize) {
    let mut order: Vec<(usize, usize)> = Vec::new();
    for (s, (preds, _)) in samples.iter().enumerate() {
        for i in 0..preds.len() {
            order.push((s, i));
        }
    }
    order.sort_by(|&(sa, ia), &(sb, ib)| {
        let score_a = samples[sa].0[ia].1;
        let score_b = samples[sb].0[ib].1;
        score_b
            .partial_cmp(&score_a)
            .unwrap()
            .then(sa.cmp(&sb))
            .then(ia.cmp(&ib))
    });
    let mut claimed: Vec<Vec<bool>> = samples.iter().map(|(_, g)| vec![false; g.len()]).collect();
    let total_gt: usize = samples.iter().map(|(_, g)| g.len()).sum();
    let mut hits = Vec::with_capacity(order.len());
    for (s, i) in order {
        let (preds, gts) = &samples[s];
        let mut best: Option<(f64, usize)> = None;
        for (j, g) in gts.iter().enumerate() {
            if claimed[s][j] {
                continue;
            }
            let iou = preds[i].0.iou(g);
            if iou >= t {
                // Highest IoU wins; ties go to the lower index.
                let better = match best {
                    None => true,
                    Some((bi, _)) => iou > bi,
                };
                if better {
                    best = Some((iou, j));
                }
            }
        }
        match best {
            Some((_, j)) => {
                claimed[s][j] = true;
                hits.push(true);
            }
            None => hits.push(false),
        }
    }
    (hits, total_gt)
}

/// AP (all-point interpolated PR area) and AR (final recall) from hit flags.
fn ap_ar_from_hits(hits: &[bool], total_gt: usize) -> (f64, f64) {
    if total_gt == 0 {
        return (0.0, 0.0);
    }
    let mut tp = 0usize;
    let mut prec = Vec::with_capacity(hits.len());
    for (k, &h) in hits.iter().enumerate() {
        if h {
            tp += 1;
        }
        prec.push(tp as f64 / (k + 1) as f64);
    }
    // Precision envelope from the right, integrated over recall increments.
    // Recall rises by 1/total_gt exactly at the hits, so summing the
    // envelope there and dividing once keeps a perfect ranking at AP = 1.
    let mut ap_units = 0.0;
    let mut env = 0.0_f64;
    for k in (0..hits.len()).rev() {
        env = env.max(prec[k]);
        if hits[k] {
            ap_units += env;
        }
    }
    let ap = ap_units / total_gt as f64;
    let ar = tp as f64 / total_gt as f64;
    (ap, ar)
}

/// Mean AP and AR over IoU thresholds for pooled samples.
pub fn map_mar_pooled(samples: &[ScoredBoxes], thresholds: &[f64]) -> (f64, f64) {
    if thresholds.is_empty() {
        return (0.0, 0.0);
    }
    let mut ap_sum = 0.0;
    let mut ar_sum = 0.0;
    for &t in thresholds {
        let (hits, total_gt) = match_at_threshold(samples, t);
        let (ap, ar) = ap_ar_from_hits(&hits, total_gt);
        ap_sum += ap;
        ar_sum += ar;
    }
    (ap_sum / thresholds.len() as f64, ar_sum / thresholds.len() as f64)
}

/// Single-sample mAP/mAR.
pub fn map_mar(
    pred_boxes: &[(BoundingBox, f64)],
    gt_boxes: &[BoundingBox],
    thresholds: &[f64],
) -> (f64, f64) {
    map_mar_pooled(&[(pred_boxes, gt_boxes)], thresholds)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// A predicted graph with detection scores: one score per node (existence)
/// and one per edge (relation), aligned with the graph's node and edge order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredGraph {
    pub graph: SpatialGraph,
    pub node_scores: Vec<f64>,
    pub edge_scores: Vec<f64>,
}

impl ScoredGraph {
    /// Wraps a plain graph with unit confidence everywhere.
    pub fn unit_scores(graph: SpatialGraph) -> Self {
        let node_scores = vec![1.0; graph.nodes.len()];
        let edge_scores = vec![1.0; graph.edges.len()];
        ScoredGraph {
            graph,
            node_scores,
            edge_scores,
        }
    }

    fn validate(&self) -> Result<(), MetricError> {
        if self.node_scores.len() != self.graph.nodes.len()
            || self.edge_scores.len() != self.graph.edges.len()
        {
            return Err(MetricError::Malformed(format!(
                "{} node scores for {} nodes, {} edge scores for {} edges",
                self.node_scores.len(),
                self.graph.nodes.len(),
                self.edge_scores.len(),
                self.graph.edges.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEntry {
    pub iou: f64,
    pub node_ap: f64,
    pub node_ar: f64,
    pub edge_ap: f64,
    pub edge_ar: f64,
}

/// Aggregate metrics over a sample set, with the configuration echoed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub node_map: f64,
    pub node_mar: f64,
    pub edge_map: f64,
    pub edge_mar: f64,
    pub smd: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub topo_precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub topo_recall: Option<f64>,
    pub per_threshold: Vec<ThresholdEntry>,
    pub config: MetricConfig,
}

/// Per-sample row backing the CSV output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetricsRow {
    pub index: usize,
    pub smd: f64,
    pub topo_precision: Option<f64>,
    pub topo_recall: Option<f64>,
    pub node_ap: f64,
    pub node_ar: f64,
    pub edge_ap: f64,
    pub edge_ar: f64,
}

/// Evaluates predictions against ground truth: SMD and topology per sample
/// (topology in 2D only), mAP/mAR pooled across samples and broken out per
/// threshold.
pub fn compute_report(
    preds: &[ScoredGraph],
    gts: &[SpatialGraph],
    cfg: &MetricConfig,
) -> Result<(MetricReport, Vec<SampleMetricsRow>), MetricError> {
    if preds.len() != gts.len() {
        return Err(MetricError::LengthMismatch(preds.len(), gts.len()));
    }
    for p in preds {
        p.validate()?;
    }
    let is_2d = preds.iter().all(|p| p.graph.dims == 2) && gts.iter().all(|g| g.dims == 2);

    let node_units: Vec<(Vec<(BoundingBox, f64)>, Vec<BoundingBox>)> = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| {
            let pb = node_boxes(&p.graph, cfg.node_box_half)
                .into_iter()
                .zip(p.node_scores.iter().copied())
                .collect();
            (pb, node_boxes(g, cfg.node_box_half))
        })
        .collect();
    let edge_units: Vec<(Vec<(BoundingBox, f64)>, Vec<BoundingBox>)> = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| {
            let pb = edge_boxes(&p.graph, cfg.edge_min_extent)
                .into_iter()
                .zip(p.edge_scores.iter().copied())
                .collect();
            (pb, edge_boxes(g, cfg.edge_min_extent))
        })
        .collect();

    let mut rows = Vec::with_capacity(preds.len());
    let mut smd_sum = 0.0;
    let mut topo_p_sum = 0.0;
    let mut topo_r_sum = 0.0;
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        let sample_smd = smd(&p.graph, g, cfg.smd_points, cfg.smd_seed)?;
        smd_sum += sample_smd;
        let sample_topo = if is_2d {
            let (tp, tr) = topo(&p.graph, g, &cfg.topo)?;
            topo_p_sum += tp;
            topo_r_sum += tr;
            Some((tp, tr))
        } else {
            None
        };
        let (nap, nar) = map_mar(&node_units[i].0, &node_units[i].1, &cfg.iou_thresholds);
        let (eap, ear) = map_mar(&edge_units[i].0, &edge_units[i].1, &cfg.iou_thresholds);
        rows.push(SampleMetricsRow {
            index: i,
            smd: sample_smd,
            topo_precision: sample_topo.map(|t| t.0),
            topo_recall: sample_topo.map(|t| t.1),
            node_ap: nap,
            node_ar: nar,
            edge_ap: eap,
            edge_ar: ear,
        });
    }

    let node_refs: Vec<ScoredBoxes> = node_units
        .iter()
        .map(|(p, g)| (p.as_slice(), g.as_slice()))
        .collect();
    let edge_refs: Vec<ScoredBoxes> = edge_units
        .iter()
        .map(|(p, g)| (p.as_slice(), g.as_slice()))
        .collect();
    let per_threshold: Vec<ThresholdEntry> = cfg
        .iou_thresholds
        .iter()
        .map(|&t| {
            let (nh, ng) = match_at_threshold(&node_refs, t);
            let (node_ap, node_ar) = ap_ar_from_hits(&nh, ng);
            let (eh, eg) = match_at_threshold(&edge_refs, t);
            let (edge_ap, edge_ar) = ap_ar_from_hits(&eh, eg);
            ThresholdEntry {
                iou: t,
                node_ap,
                node_ar,
                edge_ap,
                edge_ar,
            }
        })
        .collect();
    let k = per_threshold.len().max(1) as f64;
    let report = MetricReport {
        node_map: per_threshold.iter().map(|e| e.node_ap).sum::<f64>() / k,
        node_mar: per_threshold.iter().map(|e| e.node_ar).sum::<f64>() / k,
        edge_map: per_threshold.iter().map(|e| e.edge_ap).sum::<f64>() / k,
        edge_mar: per_threshold.iter().map(|e| e.edge_ar).sum::<f64>() / k,
        smd: smd_sum / preds.len().max(1) as f64,
        topo_precision: is_2d.then(|| topo_p_sum / preds.len().max(1) as f64),
        topo_recall: is_2d.then(|| topo_r_sum / preds.len().max(1) as f64),
        per_threshold,
        config: cfg.clone(),
    };
    Ok((report, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn segment_graph(y: f64) -> SpatialGraph {
        SpatialGraph::new(
            2,
            vec![vec![0.1, y], vec![0.6, y]],
            vec![(0, 1)],
        )
    }

    #[test]
    fn smd_identical_graphs_is_zero() {
        let g = segment_graph(0.2);
        assert_eq!(smd(&g, &g, 100, 7).unwrap(), 0.0);
    }

    #[test]
    fn smd_parallel_offset_is_delta_squared() {
        // Same seed gives both graphs identical arc offsets, so every point
        // pairs with its vertical twin at distance exactly delta.
        let delta = 0.1;
        let a = segment_graph(0.2);
        let b = segment_graph(0.2 + delta);
        let d = smd(&a, &b, 8, 3).unwrap();
        assert!((d - delta * delta).abs() < 1e-12, "smd {d}");
    }

    fn brute_force_min_mean(p: &[Vec<f64>], q: &[Vec<f64>]) -> f64 {
        fn permute(remaining: &mut Vec<usize>, chosen: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if remaining.is_empty() {
                out.push(chosen.clone());
                return;
            }
            for k in 0..remaining.len() {
                let v = remaining.remove(k);
                chosen.push(v);
                permute(remaining, chosen, out);
                chosen.pop();
                remaining.insert(k, v);
            }
        }
        let mut perms = Vec::new();
        permute(&mut (0..q.len()).collect(), &mut Vec::new(), &mut perms);
        perms
            .iter()
            .map(|perm| {
                p.iter()
                    .zip(perm)
                    .map(|(a, &j)| dist(a, &q[j]).powi(2))
                    .sum::<f64>()
                    / p.len() as f64
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn smd_matches_brute_force_on_small_samples() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for case in 0..30 {
            let rand_graph = |rng: &mut ChaCha8Rng| {
                let nodes: Vec<Vec<f64>> = (0..4)
                    .map(|_| (0..2).map(|_| rng.random_range(0.0..1.0)).collect())
                    .collect();
                SpatialGraph::new(2, nodes, vec![(0, 1), (1, 2), (2, 3)])
            };
            let a = rand_graph(&mut rng);
            let b = rand_graph(&mut rng);
            let seed = case as u64;
            let got = smd(&a, &b, 6, seed).unwrap();
            let pa = sample_along(&a, 6, seed).unwrap();
            let pb = sample_along(&b, 6, seed).unwrap();
            let want = brute_force_min_mean(&pa, &pb);
            assert!((got - want).abs() < 1e-10, "case {case}: {got} vs {want}");
        }
    }

    #[test]
    fn smd_is_symmetric() {
        let a = segment_graph(0.3);
        let b = SpatialGraph::new(
            2,
            vec![vec![0.2, 0.7], vec![0.9, 0.5], vec![0.4, 0.4]],
            vec![(0, 1), (0, 2)],
        );
        let ab = smd(&a, &b, 50, 11).unwrap();
        let ba = smd(&b, &a, 50, 11).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn smd_empty_conventions() {
        let empty = SpatialGraph::empty(2);
        let g = segment_graph(0.4);
        assert_eq!(smd(&empty, &empty, 10, 0).unwrap(), 0.0);
        assert_eq!(smd(&empty, &g, 10, 0).unwrap(), 2.0);
        assert_eq!(smd(&g, &empty, 10, 0).unwrap(), 2.0);
        // No edges but nodes: the node set stands in for the graph.
        let dots = SpatialGraph::new(2, vec![vec![0.1, 0.4], vec![0.6, 0.4]], vec![]);
        let d = smd(&dots, &g, 10, 0).unwrap();
        assert!(d < 0.3, "node-set fallback should stay small, got {d}");
    }

    #[test]
    fn topo_identical_graph_is_perfect() {
        let cfg = TopoConfig::default();
        for g in [
            segment_graph(0.5),
            SpatialGraph::new(
                2,
                vec![
                    vec![0.1, 0.1],
                    vec![0.9, 0.1],
                    vec![0.9, 0.9],
                    vec![0.5, 0.5],
                ],
                vec![(0, 1), (1, 2), (2, 3)],
            ),
        ] {
            let (p, r) = topo(&g, &g, &cfg).unwrap();
            assert_eq!((p, r), (1.0, 1.0));
        }
    }

    #[test]
    fn topo_empty_prediction_is_zero() {
        let cfg = TopoConfig::default();
        let (p, r) = topo(&SpatialGraph::empty(2), &segment_graph(0.5), &cfg).unwrap();
        assert_eq!((p, r), (0.0, 0.0));
    }

    #[test]
    fn topo_spurious_component_halves_precision() {
        let cfg = TopoConfig::default();
        let gt = segment_graph(0.2);
        // Prediction adds a far translated copy: same length, same point
        // count, all of it unmatched.
        let pred = SpatialGraph::new(
            2,
            vec![
                vec![0.1, 0.2],
                vec![0.6, 0.2],
                vec![0.1, 0.8],
                vec![0.6, 0.8],
            ],
            vec![(0, 1), (2, 3)],
        );
        let (p, r) = topo(&pred, &gt, &cfg).unwrap();
        assert_eq!(r, 1.0);
        assert_eq!(p, 0.5);
    }

    #[test]
    fn topo_rejects_3d() {
        let g = SpatialGraph::new(3, vec![vec![0.1, 0.1, 0.1]], vec![]);
        assert!(matches!(
            topo(&g, &g, &TopoConfig::default()),
            Err(MetricError::UnsupportedDims(3))
        ));
    }

    #[test]
    fn node_box_synthesis() {
        let g = SpatialGraph::new(2, vec![vec![0.5, 0.5], vec![0.0, 0.0]], vec![]);
        let boxes = node_boxes(&g, 0.05);
        assert_eq!(boxes.len(), 2);
        let close = |got: &[f64], want: &[f64]| {
            got.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-12)
        };
        let (lo, hi) = boxes[0].bounds();
        assert!(close(&lo, &[0.45, 0.45]) && close(&hi, &[0.55, 0.55]));
        // Corner box is clipped to the unit square.
        let (lo, hi) = boxes[1].bounds();
        assert!(close(&lo, &[0.0, 0.0]) && close(&hi, &[0.05, 0.05]));
    }

    #[test]
    fn edge_box_synthesis() {
        let g = SpatialGraph::new(
            2,
            vec![vec![0.2, 0.5], vec![0.8, 0.5], vec![0.1, 0.1], vec![0.7, 0.9]],
            vec![(0, 1), (2, 3)],
        );
        let boxes = edge_boxes(&g, 0.04);
        assert_eq!(boxes.len(), 2);
        // Flat horizontal edge: the y extent inflates to the minimum.
        let (lo, hi) = boxes[0].bounds();
        assert!((lo[0] - 0.2).abs() < 1e-12 && (hi[0] - 0.8).abs() < 1e-12);
        assert!((lo[1] - 0.48).abs() < 1e-12 && (hi[1] - 0.52).abs() < 1e-12);
        // Diagonal edge spanning more than the minimum keeps its exact bbox.
        let (lo, hi) = boxes[1].bounds();
        assert!((lo[0] - 0.1).abs() < 1e-12 && (hi[0] - 0.7).abs() < 1e-12);
        assert!((lo[1] - 0.1).abs() < 1e-12 && (hi[1] - 0.9).abs() < 1e-12);
    }

    fn unit_box(center: &[f64], half: f64) -> BoundingBox {
        BoundingBox::new(center.to_vec(), vec![half; center.len()])
    }

    #[test]
    fn map_mar_perfect_predictions() {
        let gt = vec![unit_box(&[0.2, 0.2], 0.05), unit_box(&[0.7, 0.7], 0.05)];
        let pred: Vec<(BoundingBox, f64)> = gt.iter().map(|b| (b.clone(), 1.0)).collect();
        let (map, mar) = map_mar(&pred, &gt, &iou_threshold_range());
        assert_eq!((map, mar), (1.0, 1.0));
    }

    #[test]
    fn map_mar_no_predictions() {
        let gt = vec![unit_box(&[0.2, 0.2], 0.05)];
        let (map, mar) = map_mar(&[], &gt, &iou_threshold_range());
        assert_eq!((map, mar), (0.0, 0.0));
    }

    /// Independent reference: own greedy matcher and an O(n^2) all-point
    /// interpolated PR integration.
    fn naive_ap_ar(
        preds: &[(BoundingBox, f64)],
        gts: &[BoundingBox],
        t: f64,
    ) -> (f64, f64) {
        if gts.is_empty() {
            return (0.0, 0.0);
        }
        let mut idx: Vec<usize> = (0..preds.len()).collect();
        idx.sort_by(|&a, &b| preds[b].1.partial_cmp(&preds[a].1).unwrap().then(a.cmp(&b)));
        let mut taken = vec![false; gts.len()];
        let mut flags = Vec::new();
        for &i in &idx {
            let mut best_j = None;
            let mut best_iou = -1.0;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let iou = preds[i].0.iou(g);
                if iou >= t && iou > best_iou {
                    best_iou = iou;
                    best_j = Some(j);
                }
            }
            if let Some(j) = best_j {
                taken[j] = true;
                flags.push(true);
            } else {
                flags.push(false);
            }
        }
        let n = flags.len();
        let mut tp = 0;
        let mut points = Vec::new(); // (recall, precision)
        for (k, &f) in flags.iter().enumerate() {
            if f {
                tp += 1;
            }
            points.push((tp as f64 / gts.len() as f64, tp as f64 / (k + 1) as f64));
        }
        let mut ap = 0.0;
        let mut prev_r = 0.0;
        for k in 0..n {
            let (r, _) = points[k];
            if r > prev_r {
                // Interpolated precision: best precision at recall >= r.
                let p_int = points[k..]
                    .iter()
                    .map(|&(_, p)| p)
                    .fold(0.0, f64::max);
                ap += (r - prev_r) * p_int;
                prev_r = r;
            }
        }
        let ar = tp as f64 / gts.len() as f64;
        (ap, ar)
    }

    #[test]
    fn map_matches_naive_reference_on_hand_case() {
        // 3 gt, 2 exact hits, 1 low-scored false positive.
        let gt = vec![
            unit_box(&[0.2, 0.2], 0.05),
            unit_box(&[0.5, 0.5], 0.05),
            unit_box(&[0.8, 0.8], 0.05),
        ];
        let pred = vec![
            (gt[0].clone(), 0.9),
            (gt[1].clone(), 0.8),
            (unit_box(&[0.2, 0.8], 0.05), 0.1),
        ];
        for &t in &iou_threshold_range() {
            let (hits, total) = match_at_threshold(&[(&pred, &gt)], t);
            let got = ap_ar_from_hits(&hits, total);
            let want = naive_ap_ar(&pred, &gt, t);
            assert!((got.0 - want.0).abs() < 1e-12, "AP {t}: {got:?} vs {want:?}");
            assert!((got.1 - want.1).abs() < 1e-12, "AR {t}");
            // Hand PR curve: hits at ranks 1,2 then a miss.
            assert_eq!(got, (2.0 / 3.0, 2.0 / 3.0));
        }
    }

    #[test]
    fn map_matches_naive_reference_on_random_cases() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let n_gt = rng.random_range(1..6);
            let n_pred = rng.random_range(0..8);
            let gt: Vec<BoundingBox> = (0..n_gt)
                .map(|_| {
                    unit_box(
                        &[rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)],
                        0.06,
                    )
                })
                .collect();
            let pred: Vec<(BoundingBox, f64)> = (0..n_pred)
                .map(|_| {
                    let base = &gt[rng.random_range(0..n_gt)];
                    let jitter = rng.random_range(-0.05..0.05);
                    (
                        unit_box(
                            &[base.center[0] + jitter, base.center[1] + jitter / 2.0],
                            0.06,
                        ),
                        rng.random_range(0.0..1.0),
                    )
                })
                .collect();
            for &t in &[0.5, 0.75, 0.95] {
                let (hits, total) = match_at_threshold(&[(&pred, &gt)], t);
                let got = ap_ar_from_hits(&hits, total);
                let want = naive_ap_ar(&pred, &gt, t);
                assert!(
                    (got.0 - want.0).abs() < 1e-12 && (got.1 - want.1).abs() < 1e-12,
                    "t {t}: {got:?} vs {want:?}"
                );
            }
        }
    }

    #[test]
    fn ap_ar_monotone_nonincreasing_in_threshold() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..50 {
            let gt: Vec<BoundingBox> = (0..4)
                .map(|_| {
                    unit_box(
                        &[rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)],
                        0.06,
                    )
                })
                .collect();
            let pred: Vec<(BoundingBox, f64)> = (0..6)
                .map(|_| {
                    let base = &gt[rng.random_range(0..4)];
                    let jitter = rng.random_range(-0.04..0.04);
                    (
                        unit_box(&[base.center[0] + jitter, base.center[1]], 0.06),
                        rng.random_range(0.0..1.0),
                    )
                })
                .collect();
            let mut prev = (f64::INFINITY, f64::INFINITY);
            for &t in &iou_threshold_range() {
                let (hits, total) = match_at_threshold(&[(&pred, &gt)], t);
                let (ap, ar) = ap_ar_from_hits(&hits, total);
                assert!(ap <= prev.0 + 1e-12 && ar <= prev.1 + 1e-12);
                prev = (ap, ar);
            }
        }
    }

    #[test]
    fn false_positive_never_raises_map_and_dropped_tp_never_raises_mar() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let thresholds = iou_threshold_range();
        for _ in 0..50 {
            let gt: Vec<BoundingBox> = (0..3)
                .map(|_| {
                    unit_box(
                        &[rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)],
                        0.05,
                    )
                })
                .collect();
            let mut pred: Vec<(BoundingBox, f64)> = gt
                .iter()
                .map(|b| (b.clone(), rng.random_range(0.5..1.0)))
                .collect();
            let (map0, mar0) = map_mar(&pred, &gt, &thresholds);
            // A geometrically useless extra prediction.
            pred.push((
                unit_box(&[rng.random_range(0.0..0.02), 0.99], 0.005),
                rng.random_range(0.0..1.0),
            ));
            let (map1, _) = map_mar(&pred, &gt, &thresholds);
            assert!(map1 <= map0 + 1e-12, "fp raised map: {map0} -> {map1}");
            pred.pop();
            pred.pop(); // drop a true positive
            let (_, mar2) = map_mar(&pred, &gt, &thresholds);
            assert!(mar2 <= mar0 + 1e-12, "dropping tp raised mar");
        }
    }

    #[test]
    fn report_includes_topo_only_in_2d() {
        let cfg = MetricConfig::default();
        let g2 = segment_graph(0.5);
        let (report, rows) =
            compute_report(&[ScoredGraph::unit_scores(g2.clone())], &[g2], &cfg).unwrap();
        assert_eq!(report.topo_precision, Some(1.0));
        assert_eq!(report.topo_recall, Some(1.0));
        assert_eq!(report.node_map, 1.0);
        assert_eq!(report.edge_map, 1.0);
        assert_eq!(report.smd, 0.0);
        assert_eq!(rows.len(), 1);
        assert_eq!(report.per_threshold.len(), 10);
        assert_eq!(report.config, cfg);

        let g3 = SpatialGraph::new(
            3,
            vec![vec![0.2, 0.2, 0.2], vec![0.7, 0.7, 0.7]],
            vec![(0, 1)],
        );
        let (report, rows) =
            compute_report(&[ScoredGraph::unit_scores(g3.clone())], &[g3], &cfg).unwrap();
        assert_eq!(report.topo_precision, None);
        assert_eq!(rows[0].topo_precision, None);
        assert_eq!(report.node_map, 1.0);
    }
}
