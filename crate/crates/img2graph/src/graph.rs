//! Spatial graphs in the unit square/cube and axis-aligned bounding boxes.
//!
//! A [`SpatialGraph`] stores nodes as normalized coordinates in `[0,1]` and
//! undirected edges as index pairs in canonical `(i, j)` order with `i < j`.
//! Every other module consumes this type, so validation and canonicalization
//! live here.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Undirected spatial graph with normalized node coordinates.
///
/// Invariants (checked by [`SpatialGraph::validate`], not by construction):
/// every coordinate component lies in `[0,1]`, every coordinate vector has
/// length `dims`, and every edge `(i, j)` satisfies `i < j` with in-range,
/// distinct indices and no duplicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialGraph {
    pub dims: usize,
    pub nodes: Vec<Vec<f64>>,
    pub edges: Vec<(usize, usize)>,
}

/// Axis-aligned box stored as center plus per-dimension half-widths.
///
/// Extents must be strictly positive and the box must overlap the unit cube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub center: Vec<f64>,
    pub extent: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Severity {
    /// Breaks an invariant; the graph must not be used downstream.
    Error,
    /// Suspicious but legal (e.g. coincident nodes).
    Warning,
}

/// One diagnostic produced by [`SpatialGraph::validate`], naming the field
/// and index it concerns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub severity: Severity,
    pub field: String,
    pub index: usize,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}[{}]: {}", self.field, self.index, self.message)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("edge {index} ({a},{b}) references a node out of range (node count {node_count})")]
    EdgeIndexOutOfRange {
        index: usize,
        a: usize,
        b: usize,
        node_count: usize,
    },
}

impl SpatialGraph {
    pub fn new(dims: usize, nodes: Vec<Vec<f64>>, edges: Vec<(usize, usize)>) -> Self {
        SpatialGraph { dims, nodes, edges }
    }

    /// Graph with no nodes and no edges.
    pub fn empty(dims: usize) -> Self {
        SpatialGraph {
            dims,
            nodes: Vec::new(),
            edges: Vec::new(),
        }
    }

    /// Diagnoses every invariant breach; an empty error set means the graph
    /// is safe for all downstream modules. Coincident nodes are legal and
    /// reported only as warnings.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.dims != 2 && self.dims != 3 {
            out.push(Violation {
                severity: Severity::Error,
                field: "dims".into(),
                index: 0,
                message: format!("dims must be 2 or 3, got {}", self.dims),
            });
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.len() != self.dims {
                out.push(Violation {
                    severity: Severity::Error,
                    field: "nodes".into(),
                    index: i,
                    message: format!(
                        "coordinate vector has length {}, expected dims {}",
                        node.len(),
                        self.dims
                    ),
                });
            }
            for (d, &c) in node.iter().enumerate() {
                if !(0.0..=1.0).contains(&c) {
                    out.push(Violation {
                        severity: Severity::Error,
                        field: "nodes".into(),
                        index: i,
                        message: format!("coordinate out of [0,1]: component {d} is {c}"),
                    });
                }
            }
        }
        let mut seen = std::collections::HashSet::new();
        for (k, &(a, b)) in self.edges.iter().enumerate() {
            if a == b {
                out.push(Violation {
                    severity: Severity::Error,
                    field: "edges".into(),
                    index: k,
                    message: format!("self-loop ({a},{b})"),
                });
                continue;
            }
            if a >= self.nodes.len() || b >= self.nodes.len() {
                out.push(Violation {
                    severity: Severity::Error,
                    field: "edges".into(),
                    index: k,
                    message: format!(
                        "node index out of range: ({a},{b}) with node count {}",
                        self.nodes.len()
                    ),
                });
                continue;
            }
            if a > b {
                out.push(Violation {
                    severity: Severity::Error,
                    field: "edges".into(),
                    index: k,
                    message: format!("edge not in canonical order: ({a},{b})"),
                });
            }
            let key = (a.min(b), a.max(b));
            if !seen.insert(key) {
                out.push(Violation {
                    severity: Severity::Error,
                    field: "edges".into(),
                    index: k,
                    message: format!("duplicate edge ({a},{b})"),
                });
            }
        }
        // Coincident nodes are not an invariant breach: flag, don't fail.
        let mut by_coord: std::collections::HashMap<Vec<u64>, usize> =
            std::collections::HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let key: Vec<u64> = node.iter().map(|c| c.to_bits()).collect();
            if let Some(&first) = by_coord.get(&key) {
                out.push(Violation {
                    severity: Severity::Warning,
                    field: "nodes".into(),
                    index: i,
                    message: format!("coincident with node {first}"),
                });
            } else {
                by_coord.insert(key, i);
            }
        }
        out
    }

    /// True when [`SpatialGraph::validate`] reports no errors (warnings allowed).
    pub fn is_valid(&self) -> bool {
        self.validate()
            .iter()
            .all(|v| v.severity != Severity::Error)
    }

    /// Reorders every edge to `(min, max)`, removes duplicates, and sorts the
    /// edge set lexicographically. Node list is untouched. Idempotent.
    pub fn canonicalize(&self) -> Result<SpatialGraph, GraphError> {
        let mut edges = Vec::with_capacity(self.edges.len());
        for (k, &(a, b)) in self.edges.iter().enumerate() {
            if a >= self.nodes.len() || b >= self.nodes.len() {
                return Err(GraphError::EdgeIndexOutOfRange {
                    index: k,
                    a,
                    b,
                    node_count: self.nodes.len(),
                });
            }
            edges.push((a.min(b), a.max(b)));
        }
        edges.sort_unstable();
        edges.dedup();
        Ok(SpatialGraph {
            dims: self.dims,
            nodes: self.nodes.clone(),
            edges,
        })
    }

    /// Number of edges incident to node `i`.
    pub fn adjacency_degree(&self, i: usize) -> Result<usize, GraphError> {
        if i >= self.nodes.len() {
            return Err(GraphError::EdgeIndexOutOfRange {
                index: i,
                a: i,
                b: i,
                node_count: self.nodes.len(),
            });
        }
        Ok(self.edges.iter().filter(|&&(a, b)| a == i || b == i).count())
    }

    /// Degrees of all nodes in one pass.
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.nodes.len()];
        for &(a, b) in &self.edges {
            if a < deg.len() {
                deg[a] += 1;
            }
            if b < deg.len() {
                deg[b] += 1;
            }
        }
        deg
    }

    /// Euclidean length of edge `(a, b)`.
    pub fn edge_length(&self, a: usize, b: usize) -> f64 {
        dist(&self.nodes[a], &self.nodes[b])
    }

    /// Sum of all edge lengths.
    pub fn total_edge_length(&self) -> f64 {
        self.edges.iter().map(|&(a, b)| self.edge_length(a, b)).sum()
    }
}

/// Euclidean distance between two coordinate vectors of equal length.
pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

impl BoundingBox {
    pub fn new(center: Vec<f64>, extent: Vec<f64>) -> Self {
        BoundingBox { center, extent }
    }

    pub fn dims(&self) -> usize {
        self.center.len()
    }

    /// Lower and upper corners.
    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let lo = self
            .center
            .iter()
            .zip(&self.extent)
            .map(|(c, e)| c - e)
            .collect();
        let hi = self
            .center
            .iter()
            .zip(&self.extent)
            .map(|(c, e)| c + e)
            .collect();
        (lo, hi)
    }

    /// Area (2D) or volume (3D).
    pub fn volume(&self) -> f64 {
        self.extent.iter().map(|e| 2.0 * e).product()
    }

    /// Volume of the intersection with `other`, zero when disjoint.
    pub fn intersection_volume(&self, other: &BoundingBox) -> f64 {
        let (alo, ahi) = self.bounds();
        let (blo, bhi) = other.bounds();
        let mut v = 1.0;
        for d in 0..self.center.len() {
            let side = (ahi[d].min(bhi[d]) - alo[d].max(blo[d])).max(0.0);
            v *= side;
        }
        v
    }

    /// Intersection-over-union with `other`.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection_volume(other);
        let union = self.volume() + other.volume() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Generalized IoU: `iou - |C \ (A ∪ B)| / |C|` where C is the smallest
    /// enclosing box. Ranges over [-1, 1].
    pub fn giou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection_volume(other);
        let union = self.volume() + other.volume() - inter;
        let (alo, ahi) = self.bounds();
        let (blo, bhi) = other.bounds();
        let mut hull = 1.0;
        for d in 0..self.center.len() {
            hull *= ahi[d].max(bhi[d]) - alo[d].min(blo[d]);
        }
        if union <= 0.0 || hull <= 0.0 {
            return 0.0;
        }
        inter / union - (hull - union) / hull
    }

    /// Clips the box to the unit cube, preserving the center+extent form.
    /// The result is degenerate (zero extent on some axis) only if the box
    /// lies entirely outside the unit cube on that axis.
    pub fn clip_to_unit(&self) -> BoundingBox {
        let (lo, hi) = self.bounds();
        let mut center = Vec::with_capacity(lo.len());
        let mut extent = Vec::with_capacity(lo.len());
        for d in 0..lo.len() {
            let l = lo[d].clamp(0.0, 1.0);
            let h = hi[d].clamp(0.0, 1.0);
            center.push(0.5 * (l + h));
            extent.push(0.5 * (h - l));
        }
        BoundingBox { center, extent }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_node_graph() -> SpatialGraph {
        SpatialGraph::new(
            2,
            vec![vec![0.1, 0.2], vec![0.9, 0.9]],
            vec![(0, 1)],
        )
    }

    #[test]
    fn validate_accepts_well_formed_graph() {
        assert!(two_node_graph().validate().is_empty());
    }

    #[test]
    fn validate_flags_out_of_range_coordinate() {
        let g = SpatialGraph::new(2, vec![vec![1.5, 0.0]], vec![]);
        let v = g.validate();
        assert_eq!(v.len(), 1);
        assert!(v[0].message.contains("coordinate out of [0,1]"));
        assert_eq!(v[0].field, "nodes");
        assert_eq!(v[0].index, 0);
    }

    #[test]
    fn validate_flags_self_loop() {
        let g = SpatialGraph::new(2, vec![vec![0.1, 0.2], vec![0.9, 0.9]], vec![(1, 1)]);
        let v = g.validate();
        assert_eq!(v.len(), 1);
        assert!(v[0].message.contains("self-loop"));
    }

    #[test]
    fn validate_warns_on_coincident_nodes() {
        let g = SpatialGraph::new(2, vec![vec![0.5, 0.5], vec![0.5, 0.5]], vec![]);
        let v = g.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].severity, Severity::Warning);
        assert!(g.is_valid());
    }

    #[test]
    fn canonicalize_orders_and_dedups() {
        let g = SpatialGraph::new(
            2,
            vec![vec![0.1, 0.1], vec![0.2, 0.2], vec![0.3, 0.3]],
            vec![(1, 0), (0, 1)],
        );
        assert_eq!(g.canonicalize().unwrap().edges, vec![(0, 1)]);

        let g = SpatialGraph::new(
            2,
            vec![vec![0.1, 0.1], vec![0.2, 0.2], vec![0.3, 0.3]],
            vec![(2, 0), (1, 0)],
        );
        assert_eq!(g.canonicalize().unwrap().edges, vec![(0, 1), (0, 2)]);

        let g = SpatialGraph::new(2, vec![vec![0.1, 0.1]], vec![]);
        assert_eq!(g.canonicalize().unwrap().edges, vec![]);
    }

    #[test]
    fn canonicalize_rejects_out_of_range_edge() {
        let g = SpatialGraph::new(2, vec![vec![0.1, 0.1]], vec![(0, 3)]);
        let err = g.canonicalize().unwrap_err();
        assert!(matches!(err, GraphError::EdgeIndexOutOfRange { index: 0, .. }));
    }

    #[test]
    fn degree_of_path_center_is_two() {
        let g = SpatialGraph::new(
            2,
            vec![vec![0.1, 0.5], vec![0.5, 0.5], vec![0.9, 0.5]],
            vec![(0, 1), (1, 2)],
        );
        assert_eq!(g.adjacency_degree(1).unwrap(), 2);
    }

    #[test]
    fn degree_of_isolated_node_is_zero() {
        let g = SpatialGraph::new(2, vec![vec![0.5, 0.5]], vec![]);
        assert_eq!(g.adjacency_degree(0).unwrap(), 0);
    }

    #[test]
    fn degree_of_star_center_is_four() {
        let g = SpatialGraph::new(
            2,
            vec![
                vec![0.5, 0.5],
                vec![0.5, 0.9],
                vec![0.5, 0.1],
                vec![0.9, 0.5],
                vec![0.1, 0.5],
            ],
            vec![(0, 1), (0, 2), (0, 3), (0, 4)],
        );
        assert_eq!(g.adjacency_degree(0).unwrap(), 4);
    }

    #[test]
    fn giou_of_disjoint_corner_boxes() {
        // Unit squares at opposite corners of a 3x3 region: IoU 0,
        // hull 9, union 2, so gIoU = -(9-2)/9 = -7/9.
        let a = BoundingBox::new(vec![0.5, 0.5], vec![0.5, 0.5]);
        let b = BoundingBox::new(vec![2.5, 2.5], vec![0.5, 0.5]);
        assert!((a.giou(&b) - (-7.0 / 9.0)).abs() < 1e-12);
    }

    #[test]
    fn giou_of_identical_boxes_is_one() {
        let a = BoundingBox::new(vec![0.3, 0.4], vec![0.1, 0.2]);
        assert!((a.giou(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clip_to_unit_keeps_interior_box() {
        let b = BoundingBox::new(vec![0.5, 0.5], vec![0.1, 0.1]);
        let c = b.clip_to_unit();
        for d in 0..2 {
            assert!((c.center[d] - b.center[d]).abs() < 1e-12);
            assert!((c.extent[d] - b.extent[d]).abs() < 1e-12);
        }
    }

    #[test]
    fn clip_to_unit_trims_corner_box() {
        let b = BoundingBox::new(vec![0.0, 0.0], vec![0.1, 0.1]).clip_to_unit();
        assert!((b.center[0] - 0.05).abs() < 1e-12);
        assert!((b.extent[0] - 0.05).abs() < 1e-12);
    }
}
