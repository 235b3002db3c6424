//! Dataset plumbing: image tensors, sample directories, patch extraction,
//! near-collinear node pruning, and the seeded synthetic generator.
//!
//! Conventions used throughout:
//!
//! - Coordinate component `k` of a graph node corresponds to image axis `k`.
//! - A normalized coordinate `c` denormalizes to the continuous voxel
//!   position `c * shape[k]`, so the image spans `[0, shape[k]]` per axis and
//!   the center of voxel `i` sits at `i + 0.5`.
//! - Tensors are row-major with the last axis fastest.
//!
//! File formats (also consumed by the CLI):
//!
//! - Graph JSON: `{"dims": 2, "nodes": [[..], ..], "edges": [[i, j], ..]}`,
//!   always written in canonical edge order.
//! - Image binary `.gtn`: magic `GTN1`, `u8` dims, per-dim `u32` little-endian
//!   sizes, then product-many `f32` little-endian intensities.
//! - A sample is a directory holding `image.gtn`, `graph.json`, and
//!   `meta.json` (`{"domain": "source" | "target"}`).

use crate::graph::{dist, SpatialGraph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use thiserror::Error;

/// Dense intensity tensor with values in `[0,1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePatch {
    pub dims: usize,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl ImagePatch {
    pub fn zeros(shape: &[usize]) -> Self {
        ImagePatch {
            dims: shape.len(),
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    /// Flat offset of a voxel index (row-major, last axis fastest).
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.dims);
        let mut off = 0;
        for (d, &i) in idx.iter().enumerate() {
            debug_assert!(i < self.shape[d]);
            off = off * self.shape[d] + i;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> f32 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f32) {
        let off = self.offset(idx);
        self.data[off] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Structural check: shape/dims consistency and data length.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.dims != self.shape.len() || !(self.dims == 2 || self.dims == 3) {
            return Err(DataError::BadShape(format!(
                "dims {} with shape {:?}",
                self.dims, self.shape
            )));
        }
        if self.shape.iter().any(|&s| s == 0) {
            return Err(DataError::BadShape(format!(
                "zero-sized axis in {:?}",
                self.shape
            )));
        }
        let expected: usize = self.shape.iter().product();
        if self.data.len() != expected {
            return Err(DataError::BadShape(format!(
                "data length {} does not match shape {:?} (expected {})",
                self.data.len(),
                self.shape,
                expected
            )));
        }
        Ok(())
    }
}

/// Which side of the adaptation problem a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// One image with its ground-truth graph and domain tag.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: ImagePatch,
    pub graph: SpatialGraph,
    pub domain: Domain,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("JSON error at {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("not a GTN file (bad magic)")]
    NotGtn,
    #[error("payload shorter than header claims ({got} bytes, need {need})")]
    Truncated { got: usize, need: usize },
    #[error("bad tensor shape: {0}")]
    BadShape(String),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("bad patch grid: {0}")]
    BadPatchGrid(String),
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Tensor binary format
// ---------------------------------------------------------------------------

const GTN_MAGIC: &[u8; 4] = b"GTN1";

/// Serializes an image to the `.gtn` binary layout.
pub fn encode_gtn(img: &ImagePatch) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + 4 * img.dims + 4 * img.data.len());
    out.extend_from_slice(GTN_MAGIC);
    out.push(img.dims as u8);
    for &s in &img.shape {
        out.extend_from_slice(&(s as u32).to_le_bytes());
    }
    for &v in &img.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses the `.gtn` binary layout.
pub fn decode_gtn(bytes: &[u8]) -> Result<ImagePatch, DataError> {
    if bytes.len() < 5 || &bytes[..4] != GTN_MAGIC {
        return Err(DataError::NotGtn);
    }
    let dims = bytes[4] as usize;
    if dims != 2 && dims != 3 {
        return Err(DataError::BadShape(format!("dims byte {dims}")));
    }
    let header = 5 + 4 * dims;
    if bytes.len() < header {
        return Err(DataError::Truncated {
            got: bytes.len(),
            need: header,
        });
    }
    let mut shape = Vec::with_capacity(dims);
    for d in 0..dims {
        let off = 5 + 4 * d;
        let s = u32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]);
        shape.push(s as usize);
    }
    let count: usize = shape.iter().product();
    let need = header + 4 * count;
    if bytes.len() < need {
        return Err(DataError::Truncated {
            got: bytes.len(),
            need,
        });
    }
    let data = bytes[header..need]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(ImagePatch { dims, shape, data })
}

pub fn write_gtn(path: &Path, img: &ImagePatch) -> Result<(), DataError> {
    std::fs::write(path, encode_gtn(img)).map_err(|e| io_err(path, e))
}

pub fn read_gtn(path: &Path) -> Result<ImagePatch, DataError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    decode_gtn(&bytes)
}

// ---------------------------------------------------------------------------
// Graph JSON and sample directories
// ---------------------------------------------------------------------------

/// Writes a graph as JSON in canonical edge order.
pub fn write_graph(path: &Path, g: &SpatialGraph) -> Result<(), DataError> {
    let canonical = g
        .canonicalize()
        .map_err(|e| DataError::InvalidGraph(e.to_string()))?;
    let json = serde_json::to_string_pretty(&canonical).map_err(|e| DataError::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    std::fs::write(path, json).map_err(|e| io_err(path, e))
}

pub fn read_graph(path: &Path) -> Result<SpatialGraph, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let g: SpatialGraph = serde_json::from_str(&text).map_err(|e| DataError::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    let errors: Vec<String> = g
        .validate()
        .into_iter()
        .filter(|v| v.severity == crate::graph::Severity::Error)
        .map(|v| v.to_string())
        .collect();
    if !errors.is_empty() {
        return Err(DataError::InvalidGraph(errors.join("; ")));
    }
    Ok(g)
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    domain: Domain,
}

/// Writes `image.gtn`, `graph.json`, and `meta.json` into `dir` (created if
/// missing).
pub fn write_sample(dir: &Path, sample: &Sample) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_gtn(&dir.join("image.gtn"), &sample.image)?;
    write_graph(&dir.join("graph.json"), &sample.graph)?;
    let meta_path = dir.join("meta.json");
    let meta = serde_json::to_string_pretty(&Meta {
        domain: sample.domain,
    })
    .map_err(|e| DataError::Json {
        path: meta_path.display().to_string(),
        source: e,
    })?;
    std::fs::write(&meta_path, meta).map_err(|e| io_err(&meta_path, e))
}

pub fn read_sample(dir: &Path) -> Result<Sample, DataError> {
    let image = read_gtn(&dir.join("image.gtn"))?;
    image.validate()?;
    let graph = read_graph(&dir.join("graph.json"))?;
    if image.dims != graph.dims {
        return Err(DataError::BadShape(format!(
            "image dims {} but graph dims {}",
            image.dims, graph.dims
        )));
    }
    let meta_path = dir.join("meta.json");
    let text = std::fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    let meta: Meta = serde_json::from_str(&text).map_err(|e| DataError::Json {
        path: meta_path.display().to_string(),
        source: e,
    })?;
    Ok(Sample {
        image,
        graph,
        domain: meta.domain,
    })
}

/// Reads every sample directory directly under `root`, sorted by name.
pub fn read_sample_dirs(root: &Path) -> Result<Vec<(String, Sample)>, DataError> {
    let mut names: Vec<String> = std::fs::read_dir(root)
        .map_err(|e| io_err(root, e))?
        .filter_map(|entry| {
            let entry = entry.ok()?;
            let path = entry.path();
            if path.is_dir() && path.join("meta.json").exists() {
                Some(entry.file_name().to_string_lossy().into_owned())
            } else {
                None
            }
        })
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|name| read_sample(&root.join(&name)).map(|s| (name, s)))
        .collect()
}

// ---------------------------------------------------------------------------
// Patch extraction
// ---------------------------------------------------------------------------

/// Clips the segment `p -> q` to the axis-aligned box `[lo, hi]`, returning
/// the parameter interval of the part inside, or `None` when disjoint.
pub fn clip_segment_to_box(
    p: &[f64],
    q: &[f64],
    lo: &[f64],
    hi: &[f64],
) -> Option<(f64, f64)> {
    let mut t0 = 0.0_f64;
    let mut t1 = 1.0_f64;
    for d in 0..p.len() {
        let dir = q[d] - p[d];
        if dir.abs() < 1e-15 {
            if p[d] < lo[d] || p[d] > hi[d] {
                return None;
            }
        } else {
            let ta = (lo[d] - p[d]) / dir;
            let tb = (hi[d] - p[d]) / dir;
            let (tmin, tmax) = if ta < tb { (ta, tb) } else { (tb, ta) };
            t0 = t0.max(tmin);
            t1 = t1.min(tmax);
            if t0 > t1 {
                return None;
            }
        }
    }
    Some((t0, t1))
}

/// Cuts an image+graph into overlapping windows. Each window becomes one
/// [`Sample`] whose graph holds the nodes inside the window (renormalized to
/// the window's `[0,1]` frame) and whose boundary-crossing edges are clipped
/// with inserted boundary nodes, so patch graphs stay faithful to the
/// visible geometry.
///
/// A node exactly on a shared window boundary belongs to the lower-index
/// patch only, so `stride = patch_size` partitions node occurrences.
/// Windows are enumerated in row-major grid order.
pub fn extract_patches(
    image: &ImagePatch,
    graph: &SpatialGraph,
    patch_size: &[usize],
    stride: &[usize],
) -> Result<Vec<Sample>, DataError> {
    image.validate()?;
    if patch_size.len() != image.dims || stride.len() != image.dims {
        return Err(DataError::BadPatchGrid(format!(
            "patch_size {patch_size:?} / stride {stride:?} do not match image dims {}",
            image.dims
        )));
    }
    for d in 0..image.dims {
        if patch_size[d] == 0 || patch_size[d] > image.shape[d] {
            return Err(DataError::BadPatchGrid(format!(
                "patch size {} exceeds image extent {} on axis {d}",
                patch_size[d], image.shape[d]
            )));
        }
        if stride[d] == 0 {
            return Err(DataError::BadPatchGrid(format!("zero stride on axis {d}")));
        }
    }
    let grid: Vec<usize> = (0..image.dims)
        .map(|d| (image.shape[d] - patch_size[d]) / stride[d] + 1)
        .collect();

    let mut out = Vec::new();
    let mut grid_pos = vec![0usize; image.dims];
    loop {
        out.push(extract_one_patch(image, graph, patch_size, stride, &grid_pos));
        // Advance row-major (last axis fastest).
        let mut d = image.dims;
        loop {
            if d == 0 {
                return Ok(out);
            }
            d -= 1;
            grid_pos[d] += 1;
            if grid_pos[d] < grid[d] {
                break;
            }
            grid_pos[d] = 0;
        }
    }
}

fn extract_one_patch(
    image: &ImagePatch,
    graph: &SpatialGraph,
    patch_size: &[usize],
    stride: &[usize],
    grid_pos: &[usize],
) -> Sample {
    let dims = image.dims;
    let lo: Vec<f64> = (0..dims).map(|d| (grid_pos[d] * stride[d]) as f64).collect();
    let hi: Vec<f64> = (0..dims).map(|d| lo[d] + patch_size[d] as f64).collect();

    // Voxel window copy.
    let mut patch_img = ImagePatch::zeros(patch_size);
    let mut idx = vec![0usize; dims];
    'copy: loop {
        let src: Vec<usize> = (0..dims)
            .map(|d| grid_pos[d] * stride[d] + idx[d])
            .collect();
        let v = image.get(&src);
        patch_img.set(&idx, v);
        let mut d = dims;
        loop {
            if d == 0 {
                break 'copy;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < patch_size[d] {
                break;
            }
            idx[d] = 0;
        }
    }

    // Continuous voxel positions of every node.
    let denorm: Vec<Vec<f64>> = graph
        .nodes
        .iter()
        .map(|n| {
            n.iter()
                .enumerate()
                .map(|(d, &c)| c * image.shape[d] as f64)
                .collect()
        })
        .collect();

    let inside = |p: &[f64]| -> bool {
        (0..dims).all(|d| {
            p[d] >= lo[d] && p[d] <= hi[d] && (p[d] > lo[d] || grid_pos[d] == 0)
        })
    };

    let renorm = |p: &[f64]| -> Vec<f64> {
        (0..dims)
            .map(|d| ((p[d] - lo[d]) / patch_size[d] as f64).clamp(0.0, 1.0))
            .collect()
    };

    let mut nodes: Vec<Vec<f64>> = Vec::new();
    let mut node_map: HashMap<usize, usize> = HashMap::new();
    for (i, p) in denorm.iter().enumerate() {
        if inside(p) {
            node_map.insert(i, nodes.len());
            nodes.push(renorm(p));
        }
    }

    // Boundary nodes are shared between edges that cross at the same point.
    let mut boundary_cache: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut edges: Vec<(usize, usize)> = Vec::new();

    for &(u, v) in &graph.edges {
        let (pu, pv) = (&denorm[u], &denorm[v]);
        let u_in = node_map.get(&u).copied();
        let v_in = node_map.get(&v).copied();
        if let (Some(a), Some(b)) = (u_in, v_in) {
            if a != b {
                edges.push((a.min(b), a.max(b)));
            }
            continue;
        }
        let Some((t0, t1)) = clip_segment_to_box(pu, pv, &lo, &hi) else {
            continue;
        };
        if t1 - t0 < 1e-12 {
            continue; // grazing contact, no visible extent
        }
        let mut endpoint = |t: f64, original: Option<usize>| -> usize {
            if let Some(idx) = original {
                return idx;
            }
            let p: Vec<f64> = (0..dims).map(|d| pu[d] + t * (pv[d] - pu[d])).collect();
            let coords = renorm(&p);
            let key: Vec<u64> = coords.iter().map(|c| c.to_bits()).collect();
            *boundary_cache.entry(key).or_insert_with(|| {
                nodes.push(coords);
                nodes.len() - 1
            })
        };
        let a = endpoint(t0, if t0 == 0.0 { u_in } else { None });
        let b = endpoint(t1, if t1 == 1.0 { v_in } else { None });
        if a != b {
            edges.push((a.min(b), a.max(b)));
        }
    }

    edges.sort_unstable();
    edges.dedup();
    Sample {
        image: patch_img,
        graph: SpatialGraph::new(dims, nodes, edges),
        domain: Domain::Source,
    }
}

// ---------------------------------------------------------------------------
// Redundant-node pruning
// ---------------------------------------------------------------------------

/// Interior angle at `b` between segments `b->a` and `b->c`, in degrees.
/// A straight-through chain gives 180°.
fn interior_angle_deg(a: &[f64], b: &[f64], c: &[f64]) -> Option<f64> {
    let (la, lc) = (dist(a, b), dist(c, b));
    if la < 1e-12 || lc < 1e-12 {
        return None;
    }
    let dot: f64 = (0..a.len())
        .map(|d| (a[d] - b[d]) * (c[d] - b[d]))
        .sum::<f64>()
        / (la * lc);
    Some(dot.clamp(-1.0, 1.0).acos().to_degrees())
}

/// Default pruning threshold in degrees.
pub const DEFAULT_PRUNE_THRESHOLD_DEG: f64 = 160.0;

/// Iteratively removes degree-2 nodes whose interior angle exceeds the
/// threshold (i.e. the two incident segments are nearly collinear), splicing
/// the neighbors together, until no such node remains.
///
/// Removal preserves connectivity: the two incident edges are replaced by one
/// edge joining the neighbors. Nodes forming sharp corners (angle below the
/// threshold) are kept.
pub fn prune_redundant_nodes(g: &SpatialGraph, threshold_deg: f64) -> SpatialGraph {
    let mut graph = g.canonicalize().expect("prune input must have in-range edges");
    loop {
        let deg = graph.degrees();
        let mut removed = false;
        for i in 0..graph.nodes.len() {
            if deg[i] != 2 {
                continue;
            }
            let neighbors: Vec<usize> = graph
                .edges
                .iter()
                .filter_map(|&(a, b)| {
                    if a == i {
                        Some(b)
                    } else if b == i {
                        Some(a)
                    } else {
                        None
                    }
                })
                .collect();
            let (na, nc) = (neighbors[0], neighbors[1]);
            let Some(angle) =
                interior_angle_deg(&graph.nodes[na], &graph.nodes[i], &graph.nodes[nc])
            else {
                continue;
            };
            if angle <= threshold_deg {
                continue;
            }
            // Splice: drop node i, bridge its neighbors.
            let mut edges: Vec<(usize, usize)> = graph
                .edges
                .iter()
                .filter(|&&(a, b)| a != i && b != i)
                .copied()
                .collect();
            edges.push((na.min(nc), na.max(nc)));
            let remap = |x: usize| if x > i { x - 1 } else { x };
            let mut nodes = graph.nodes;
            nodes.remove(i);
            let edges = edges
                .into_iter()
                .map(|(a, b)| (remap(a), remap(b)))
                .collect();
            graph = SpatialGraph::new(graph.dims, nodes, edges)
                .canonicalize()
                .expect("splice keeps indices in range");
            removed = true;
            break;
        }
        if !removed {
            return graph;
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Graph layout family for [`gen_synthetic`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthStyle {
    /// Road-like: jittered junction grid with axis-dominant straight segments.
    Grid,
    /// Vessel-like: branching curved polylines grown from a root.
    Tree,
}

impl std::str::FromStr for SynthStyle {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "grid" => Ok(SynthStyle::Grid),
            "tree" => Ok(SynthStyle::Tree),
            other => Err(format!("unknown style '{other}' (expected grid or tree)")),
        }
    }
}

/// Tunables for the synthetic generator. The defaults produce 64² images
/// (32³ for 3D) that train in seconds on one core.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Image side length in voxels (all axes).
    pub size_2d: usize,
    pub size_3d: usize,
    /// Junctions per axis for [`SynthStyle::Grid`].
    pub grid_k: usize,
    /// Probability of keeping each grid neighbor link.
    pub grid_edge_prob: f64,
    /// Maximum absolute jitter of junction positions, normalized units.
    pub grid_jitter: f64,
    /// Node budget for [`SynthStyle::Tree`].
    pub tree_max_nodes: usize,
    pub tree_branch_prob: f64,
    /// Polyline step length, normalized units.
    pub tree_step: f64,
    /// Uniform background noise ceiling.
    pub noise_level: f64,
    /// Peak intensity of rendered lines and node dots.
    pub line_brightness: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size_2d: 64,
            size_3d: 32,
            grid_k: 4,
            grid_edge_prob: 0.65,
            grid_jitter: 0.02,
            tree_max_nodes: 12,
            tree_branch_prob: 0.35,
            tree_step: 0.16,
            noise_level: 0.2,
            line_brightness: 0.95,
        }
    }
}

/// Deterministically generates `n_samples` synthetic samples. Same seed,
/// same bytes.
pub fn gen_synthetic(
    seed: u64,
    n_samples: usize,
    dims: usize,
    style: SynthStyle,
) -> Vec<Sample> {
    gen_synthetic_with(seed, n_samples, dims, style, &SynthConfig::default())
}

pub fn gen_synthetic_with(
    seed: u64,
    n_samples: usize,
    dims: usize,
    style: SynthStyle,
    cfg: &SynthConfig,
) -> Vec<Sample> {
    assert!(dims == 2 || dims == 3, "dims must be 2 or 3");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_samples)
        .map(|_| {
            let graph = match style {
                SynthStyle::Grid => grid_graph(dims, cfg, &mut rng),
                SynthStyle::Tree => tree_graph(dims, cfg, &mut rng),
            };
            let size = if dims == 2 { cfg.size_2d } else { cfg.size_3d };
            let shape = vec![size; dims];
            let image = render_graph(&graph, &shape, cfg, &mut rng);
            Sample {
                image,
                graph,
                domain: Domain::Source,
            }
        })
        .collect()
}

fn grid_graph(dims: usize, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> SpatialGraph {
    let k = cfg.grid_k;
    let cells: usize = (0..dims).map(|_| k).product();
    let mut nodes = Vec::with_capacity(cells);
    let mut grid_idx = vec![0usize; dims];
    // Junctions in row-major order so node index arithmetic mirrors offsets.
    for _ in 0..cells {
        let coord: Vec<f64> = grid_idx
            .iter()
            .map(|&i| {
                let base = (i as f64 + 0.5) / k as f64;
                (base + rng.random_range(-cfg.grid_jitter..=cfg.grid_jitter)).clamp(0.02, 0.98)
            })
            .collect();
        nodes.push(coord);
        let mut d = dims;
        loop {
            if d == 0 {
                break;
            }
            d -= 1;
            grid_idx[d] += 1;
            if grid_idx[d] < k {
                break;
            }
            grid_idx[d] = 0;
        }
    }
    let flat = |idx: &[usize]| -> usize {
        let mut off = 0;
        for &i in idx {
            off = off * k + i;
        }
        off
    };
    let mut edges = Vec::new();
    let mut grid_idx = vec![0usize; dims];
    for _ in 0..cells {
        for d in 0..dims {
            if grid_idx[d] + 1 < k && rng.random_range(0.0..1.0) < cfg.grid_edge_prob {
                let mut nb = grid_idx.clone();
                nb[d] += 1;
                edges.push((flat(&grid_idx), flat(&nb)));
            }
        }
        let mut d = dims;
        loop {
            if d == 0 {
                break;
            }
            d -= 1;
            grid_idx[d] += 1;
            if grid_idx[d] < k {
                break;
            }
            grid_idx[d] = 0;
        }
    }
    let g = SpatialGraph::new(dims, nodes, edges)
        .canonicalize()
        .expect("grid indices in range");
    drop_isolated_nodes(&g)
}

fn drop_isolated_nodes(g: &SpatialGraph) -> SpatialGraph {
    let deg = g.degrees();
    let mut remap = vec![usize::MAX; g.nodes.len()];
    let mut nodes = Vec::new();
    for (i, node) in g.nodes.iter().enumerate() {
        if deg[i] > 0 {
            remap[i] = nodes.len();
            nodes.push(node.clone());
        }
    }
    let edges = g
        .edges
        .iter()
        .map(|&(a, b)| (remap[a], remap[b]))
        .collect();
    SpatialGraph::new(g.dims, nodes, edges)
}

fn random_unit(dims: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dims).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-3 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

fn tree_graph(dims: usize, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> SpatialGraph {
    let mut nodes: Vec<Vec<f64>> = Vec::new();
    let mut edges: Vec<(usize, usize)> = Vec::new();
    let root: Vec<f64> = (0..dims).map(|_| rng.random_range(0.3..0.7)).collect();
    nodes.push(root.clone());
    let mut stack = vec![(0usize, random_unit(dims, rng))];
    while let Some((from, mut dir)) = stack.pop() {
        let mut cur = from;
        loop {
            if nodes.len() >= cfg.tree_max_nodes {
                return SpatialGraph::new(dims, nodes, edges)
                    .canonicalize()
                    .expect("tree indices in range");
            }
            // Curve the walk: blend in a random direction, renormalize.
            let wobble = random_unit(dims, rng);
            let mut next_dir: Vec<f64> = dir
                .iter()
                .zip(&wobble)
                .map(|(d, w)| d + 0.45 * w)
                .collect();
            let norm: f64 = next_dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in &mut next_dir {
                *x /= norm;
            }
            dir = next_dir;
            let step = cfg.tree_step * rng.random_range(0.7..1.3);
            let next: Vec<f64> = nodes[cur]
                .iter()
                .zip(&dir)
                .map(|(p, d)| p + step * d)
                .collect();
            if next.iter().any(|&c| !(0.05..=0.95).contains(&c)) {
                break; // branch ran off the canvas
            }
            nodes.push(next);
            let idx = nodes.len() - 1;
            edges.push((cur, idx));
            if rng.random_range(0.0..1.0) < cfg.tree_branch_prob {
                stack.push((idx, random_unit(dims, rng)));
            }
            cur = idx;
        }
    }
    SpatialGraph::new(dims, nodes, edges)
        .canonicalize()
        .expect("tree indices in range")
}

/// Distance from a point to the segment `a -> b`.
fn point_segment_dist(p: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let mut ab2 = 0.0;
    let mut ap_ab = 0.0;
    for d in 0..p.len() {
        let ab = b[d] - a[d];
        ab2 += ab * ab;
        ap_ab += (p[d] - a[d]) * ab;
    }
    let t = if ab2 < 1e-24 {
        0.0
    } else {
        (ap_ab / ab2).clamp(0.0, 1.0)
    };
    let mut acc = 0.0;
    for d in 0..p.len() {
        let closest = a[d] + t * (b[d] - a[d]);
        let diff = p[d] - closest;
        acc += diff * diff;
    }
    acc.sqrt()
}

/// Renders edges as bright anti-aliased segments (plus a dot per node) over
/// uniform dark noise. Every node ends up within a couple of voxels of an
/// above-background pixel, which downstream render checks rely on.
fn render_graph(
    g: &SpatialGraph,
    shape: &[usize],
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> ImagePatch {
    let dims = shape.len();
    let mut img = ImagePatch::zeros(shape);
    for v in &mut img.data {
        *v = rng.random_range(0.0..cfg.noise_level) as f32;
    }
    // Continuous voxel positions of nodes.
    let denorm = |n: &[f64]| -> Vec<f64> {
        n.iter()
            .enumerate()
            .map(|(d, &c)| c * shape[d] as f64)
            .collect()
    };

    let stamp = |img: &mut ImagePatch, a: &[f64], b: &[f64]| {
        // Iterate the inflated bounding box of the segment.
        let pad = 2.0;
        let lo: Vec<usize> = (0..dims)
            .map(|d| (a[d].min(b[d]) - pad).floor().max(0.0) as usize)
            .collect();
        let hi: Vec<usize> = (0..dims)
            .map(|d| ((a[d].max(b[d]) + pad).ceil() as usize).min(shape[d]))
            .collect();
        if (0..dims).any(|d| lo[d] >= hi[d]) {
            return;
        }
        let mut idx = lo.clone();
        loop {
            let center: Vec<f64> = idx.iter().map(|&i| i as f64 + 0.5).collect();
            let d = point_segment_dist(&center, a, b);
            let glow = (1.5 - d).clamp(0.0, 1.0) * cfg.line_brightness;
            if glow > 0.0 {
                let off = img.offset(&idx);
                img.data[off] = img.data[off].max(glow as f32);
            }
            let mut ax = dims;
            loop {
                if ax == 0 {
                    return;
                }
                ax -= 1;
                idx[ax] += 1;
                if idx[ax] < hi[ax] {
                    break;
                }
                idx[ax] = lo[ax];
            }
        }
    };

    for &(u, v) in &g.edges {
        let (a, b) = (denorm(&g.nodes[u]), denorm(&g.nodes[v]));
        stamp(&mut img, &a, &b);
    }
    for node in &g.nodes {
        let p = denorm(node);
        stamp(&mut img, &p, &p);
    }
    for v in &mut img.data {
        *v = v.clamp(0.0, 1.0);
    }
    img
}
