//! Lifts a 2D sample into a 3D volume for cross-dimension pretraining:
//! bilinear resize, slice embedding at z = 0.5, and a seeded random rotation
//! about the volume center with trilinear resampling.
//!
//! All geometry happens in normalized [0,1] coordinates; the voxel center of
//! index `i` on an axis of size `S` sits at normalized `(i + 0.5) / S`.

use crate::data::{Domain, ImagePatch, Sample};
use crate::graph::SpatialGraph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProjectError {
    #[error("resize target must be at least 1 per axis, got {0:?}")]
    ZeroTarget(Vec<usize>),
    #[error("expected a {expected}D input, got {got}D")]
    WrongDims { expected: usize, got: usize },
    #[error("not a rotation matrix: {0}")]
    BadRotation(String),
}

/// Proper rotation (orthonormal, det +1) of 3D space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation3 {
    m: [[f64; 3]; 3],
}

impl Rotation3 {
    pub fn identity() -> Self {
        Rotation3 {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Validates orthonormality and determinant within 1e-9.
    pub fn from_matrix(m: [[f64; 3]; 3]) -> Result<Self, ProjectError> {
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| m[i][k] * m[j][k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-9 {
                    return Err(ProjectError::BadRotation(format!(
                        "row {i} . row {j} = {dot}, expected {expect}"
                    )));
                }
            }
        }
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        if (det - 1.0).abs() > 1e-9 {
            return Err(ProjectError::BadRotation(format!("determinant {det}")));
        }
        Ok(Rotation3 { m })
    }

    /// Exact 90-degree multiples about a coordinate axis. Entries are -1, 0,
    /// or 1, so applying the rotation to exactly representable coordinates
    /// stays exact; `quarters` counts counterclockwise turns.
    pub fn quarter_turn(axis: usize, quarters: u32) -> Self {
        assert!(axis < 3);
        let (a, b) = match axis {
            0 => (1, 2),
            1 => (2, 0),
            _ => (0, 1),
        };
        let (c, s) = match quarters % 4 {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        };
        let mut m = [[0.0; 3]; 3];
        m[axis][axis] = 1.0;
        m[a][a] = c;
        m[a][b] = -s;
        m[b][a] = s;
        m[b][b] = c;
        Rotation3 { m }
    }

    pub fn from_axis_angle(axis: usize, radians: f64) -> Self {
        assert!(axis < 3);
        let (a, b) = match axis {
            0 => (1, 2),
            1 => (2, 0),
            _ => (0, 1),
        };
        let (s, c) = radians.sin_cos();
        let mut m = [[0.0; 3]; 3];
        m[axis][axis] = 1.0;
        m[a][a] = c;
        m[a][b] = -s;
        m[b][a] = s;
        m[b][b] = c;
        Rotation3 { m }
    }

    /// Unit quaternion to matrix. The quaternion need not be pre-normalized.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        let (w, x, y, z) = (w / n, x / n, y / n, z / n);
        Rotation3 {
            m: [
                [
                    1.0 - 2.0 * (y * y + z * z),
                    2.0 * (x * y - w * z),
                    2.0 * (x * z + w * y),
                ],
                [
                    2.0 * (x * y + w * z),
                    1.0 - 2.0 * (x * x + z * z),
                    2.0 * (y * z - w * x),
                ],
                [
                    2.0 * (x * z - w * y),
                    2.0 * (y * z + w * x),
                    1.0 - 2.0 * (x * x + y * y),
                ],
            ],
        }
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    pub fn is_identity(&self) -> bool {
        *self == Rotation3::identity()
    }

    pub fn apply(&self, v: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (i, row) in self.m.iter().enumerate() {
            out[i] = row[0] * v[0] + row[1] * v[1] + row[2] * v[2];
        }
        out
    }

    /// Applies the inverse rotation (the transpose).
    pub fn apply_inverse(&self, v: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (i, item) in out.iter_mut().enumerate() {
            *item = self.m[0][i] * v[0] + self.m[1][i] * v[1] + self.m[2][i] * v[2];
        }
        out
    }
}

/// Uniform rotation over SO(3): four standard normals as a quaternion.
pub fn random_rotation(seed: u64) -> Rotation3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q: Vec<f64> = (0..4)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Rotation3::from_quaternion(q[0], q[1], q[2], q[3])
}

/// Center-aligned bilinear resize of a 2D image. Graph coordinates are
/// normalized, so resizing never touches the graph.
pub fn resize2d(img: &ImagePatch, target: (usize, usize)) -> Result<ImagePatch, ProjectError> {
    if img.dims != 2 {
        return Err(ProjectError::WrongDims {
            expected: 2,
            got: img.dims,
        });
    }
    if target.0 == 0 || target.1 == 0 {
        return Err(ProjectError::ZeroTarget(vec![target.0, target.1]));
    }
    if target.0 == img.shape[0] && target.1 == img.shape[1] {
        return Ok(img.clone());
    }
    let (sh, sw) = (img.shape[0], img.shape[1]);
    let mut out = ImagePatch::zeros(&[target.0, target.1]);
    let scale0 = sh as f64 / target.0 as f64;
    let scale1 = sw as f64 / target.1 as f64;
    for i in 0..target.0 {
        let y = (i as f64 + 0.5) * scale0 - 0.5;
        let y0 = y.floor();
        let fy = y - y0;
        let (ya, yb) = (
            (y0 as isize).clamp(0, sh as isize - 1) as usize,
            (y0 as isize + 1).clamp(0, sh as isize - 1) as usize,
        );
        for j in 0..target.1 {
            let x = (j as f64 + 0.5) * scale1 - 0.5;
            let x0 = x.floor();
            let fx = x - x0;
            let (xa, xb) = (
                (x0 as isize).clamp(0, sw as isize - 1) as usize,
                (x0 as isize + 1).clamp(0, sw as isize - 1) as usize,
            );
            let v = (1.0 - fy) * (1.0 - fx) * img.get(&[ya, xa]) as f64
                + (1.0 - fy) * fx * img.get(&[ya, xb]) as f64
                + fy * (1.0 - fx) * img.get(&[yb, xa]) as f64
                + fy * fx * img.get(&[yb, xb]) as f64;
            out.set(&[i, j], v as f32);
        }
    }
    Ok(out)
}

/// Embeds a 2D image into an otherwise-zero volume of the given depth at the
/// slice whose normalized z-center is nearest 0.5 (ties to the lower index),
/// and lifts every node with third coordinate 0.5.
pub fn embed_slice(
    img: &ImagePatch,
    graph: &SpatialGraph,
    depth: usize,
) -> Result<(ImagePatch, SpatialGraph), ProjectError> {
    if img.dims != 2 || graph.dims != 2 {
        return Err(ProjectError::WrongDims {
            expected: 2,
            got: if img.dims != 2 { img.dims } else { graph.dims },
        });
    }
    if depth == 0 {
        return Err(ProjectError::ZeroTarget(vec![depth]));
    }
    let (h, w) = (img.shape[0], img.shape[1]);
    let mut vol = ImagePatch::zeros(&[h, w, depth]);
    let k = (depth - 1) / 2;
    for i in 0..h {
        for j in 0..w {
            vol.set(&[i, j, k], img.get(&[i, j]));
        }
    }
    let nodes = graph
        .nodes
        .iter()
        .map(|n| vec![n[0], n[1], 0.5])
        .collect();
    let lifted = SpatialGraph::new(3, nodes, graph.edges.clone());
    Ok((vol, lifted))
}

/// A rotated sample plus the fraction of nodes that left the unit cube.
#[derive(Debug, Clone)]
pub struct Rotated {
    pub sample: Sample,
    pub dropped_fraction: f64,
}

fn trilinear_zero_pad(vol: &ImagePatch, pos: [f64; 3]) -> f64 {
    let mut acc = 0.0;
    let base: Vec<isize> = pos.iter().map(|&p| p.floor() as isize).collect();
    let frac: Vec<f64> = pos
        .iter()
        .zip(&base)
        .map(|(&p, &b)| p - b as f64)
        .collect();
    for corner in 0..8 {
        let mut weight = 1.0;
        let mut idx = [0usize; 3];
        let mut outside = false;
        for d in 0..3 {
            let hi = (corner >> d) & 1 == 1;
            weight *= if hi { frac[d] } else { 1.0 - frac[d] };
            let c = base[d] + if hi { 1 } else { 0 };
            if c < 0 || c >= vol.shape[d] as isize {
                outside = true; // zero padding
                break;
            }
            idx[d] = c as usize;
        }
        if !outside && weight != 0.0 {
            acc += weight * vol.get(&idx) as f64;
        }
    }
    acc
}

/// Rotates a volume and its graph about the volume center (0.5, 0.5, 0.5).
/// Nodes leaving [0,1]^3 are dropped together with their incident edges; the
/// volume is resampled through the inverse rotation with trilinear
/// interpolation and zero padding. An exact-identity rotation passes both
/// volume and graph through bit-identically.
pub fn rotate_sample(
    vol: &ImagePatch,
    graph: &SpatialGraph,
    r: &Rotation3,
) -> Result<Rotated, ProjectError> {
    if vol.dims != 3 || graph.dims != 3 {
        return Err(ProjectError::WrongDims {
            expected: 3,
            got: if vol.dims != 3 { vol.dims } else { graph.dims },
        });
    }
    if r.is_identity() {
        return Ok(Rotated {
            sample: Sample {
                image: vol.clone(),
                graph: graph.clone(),
                domain: Domain::Source,
            },
            dropped_fraction: 0.0,
        });
    }
    const C: f64 = 0.5;

    let mut keep_map = vec![usize::MAX; graph.nodes.len()];
    let mut nodes = Vec::new();
    for (i, n) in graph.nodes.iter().enumerate() {
        let p = r.apply([n[0] - C, n[1] - C, n[2] - C]);
        let q = [p[0] + C, p[1] + C, p[2] + C];
        if q.iter().all(|&c| (0.0..=1.0).contains(&c)) {
            keep_map[i] = nodes.len();
            nodes.push(q.to_vec());
        }
    }
    let edges: Vec<(usize, usize)> = graph
        .edges
        .iter()
        .filter_map(|&(a, b)| {
            let (ka, kb) = (keep_map[a], keep_map[b]);
            if ka != usize::MAX && kb != usize::MAX {
                Some((ka.min(kb), ka.max(kb)))
            } else {
                None
            }
        })
        .collect();
    let dropped = graph.nodes.len() - nodes.len();
    let dropped_fraction = if graph.nodes.is_empty() {
        0.0
    } else {
        dropped as f64 / graph.nodes.len() as f64
    };

    let mut out = ImagePatch::zeros(&vol.shape);
    let shape = &vol.shape;
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            for k in 0..shape[2] {
                let p = [
                    (i as f64 + 0.5) / shape[0] as f64 - C,
                    (j as f64 + 0.5) / shape[1] as f64 - C,
                    (k as f64 + 0.5) / shape[2] as f64 - C,
                ];
                let q = r.apply_inverse(p);
                let src = [
                    (q[0] + C) * shape[0] as f64 - 0.5,
                    (q[1] + C) * shape[1] as f64 - 0.5,
                    (q[2] + C) * shape[2] as f64 - 0.5,
                ];
                let v = trilinear_zero_pad(vol, src);
                out.set(&[i, j, k], v as f32);
            }
        }
    }
    Ok(Rotated {
        sample: Sample {
            image: out,
            graph: SpatialGraph::new(3, nodes, edges),
            domain: Domain::Source,
        },
        dropped_fraction,
    })
}

/// Full projection with a caller-chosen rotation (test and inspection hook).
pub fn project_with_rotation(
    sample2d: &Sample,
    target_shape: [usize; 3],
    r: &Rotation3,
) -> Result<Rotated, ProjectError> {
    let resized = resize2d(&sample2d.image, (target_shape[0], target_shape[1]))?;
    let (vol, lifted) = embed_slice(&resized, &sample2d.graph, target_shape[2])?;
    let mut rotated = rotate_sample(&vol, &lifted, r)?;
    rotated.sample.domain = Domain::Source;
    Ok(rotated)
}

/// Projects a 2D sample to 3D with a seeded random rotation: resize, embed
/// at z = 0.5, rotate about the center. The output is tagged as source.
pub fn project(
    sample2d: &Sample,
    target_shape: [usize; 3],
    seed: u64,
) -> Result<Rotated, ProjectError> {
    project_with_rotation(sample2d, target_shape, &random_rotation(seed))
}
