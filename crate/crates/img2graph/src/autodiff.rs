//! Scalar reverse-mode automatic differentiation on a tape, with a
//! gradient-reversal op and small MLP building blocks.
//!
//! Every scalar in a computation lives as a node on a [`Tape`]; a [`Var`] is
//! a copyable handle (index) into that tape. Nodes record their operands and
//! the local derivatives evaluated at forward time, so [`Tape::backward`] is
//! a single reverse sweep. Because nodes are appended in evaluation order,
//! the tape is always topologically sorted and no explicit ordering pass is
//! needed.
//!
//! The design is deliberately scalar rather than tensor-shaped: the models in
//! this crate have tens to thousands of parameters, and a scalar graph keeps
//! the gradient-reversal semantics exactly auditable (see
//! [`Tape::grad_reverse`]).
//!
//! Training loops reuse one tape: create parameters first, remember
//! [`Tape::mark`], build the loss graph, call backward and an optimizer step,
//! then [`Tape::rewind`] back to the mark. Parameters keep their updated data
//! across rewinds.
//!
//! ```
//! use img2graph::autodiff::Tape;
//!
//! let mut tape = Tape::new();
//! let x = tape.value(3.0);
//! let y = tape.mul(x, x);
//! tape.backward(y);
//! assert_eq!(tape.grad(x), 6.0);
//! ```

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const NO_PARENT: u32 = u32::MAX;

#[derive(Debug, Clone, Copy)]
struct Node {
    data: f64,
    grad: f64,
    parents: [u32; 2],
    local: [f64; 2],
}

/// Handle to a scalar on a [`Tape`]. Valid only for the tape that created it
/// and only until that tape is rewound past it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

/// Append-only computation tape. All ops push one node and return its handle.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Position to pass to [`Tape::rewind`] later.
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Drops every node at or beyond `mark`. Handles created after the mark
    /// become invalid; nodes before it (e.g. parameters) survive with their
    /// current data.
    pub fn rewind(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    pub fn data(&self, v: Var) -> f64 {
        self.nodes[v.0 as usize].data
    }

    pub fn set_data(&mut self, v: Var, x: f64) {
        self.nodes[v.0 as usize].data = x;
    }

    pub fn grad(&self, v: Var) -> f64 {
        self.nodes[v.0 as usize].grad
    }

    fn push(&mut self, data: f64, parents: [u32; 2], local: [f64; 2]) -> Var {
        let idx = u32::try_from(self.nodes.len()).expect("tape overflow");
        self.nodes.push(Node {
            data,
            grad: 0.0,
            parents,
            local,
        });
        Var(idx)
    }

    /// New leaf holding `x` (a parameter or constant input).
    pub fn value(&mut self, x: f64) -> Var {
        self.push(x, [NO_PARENT; 2], [0.0; 2])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let x = self.data(a) + self.data(b);
        self.push(x, [a.0, b.0], [1.0, 1.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let x = self.data(a) - self.data(b);
        self.push(x, [a.0, b.0], [1.0, -1.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (da, db) = (self.data(a), self.data(b));
        self.push(da * db, [a.0, b.0], [db, da])
    }

    /// `a / b`; caller guarantees `b != 0`.
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (da, db) = (self.data(a), self.data(b));
        self.push(da / db, [a.0, b.0], [1.0 / db, -da / (db * db)])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.push(-self.data(a), [a.0, NO_PARENT], [-1.0, 0.0])
    }

    /// `k*x + c` in one node.
    pub fn affine(&mut self, a: Var, k: f64, c: f64) -> Var {
        self.push(k * self.data(a) + c, [a.0, NO_PARENT], [k, 0.0])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let e = self.data(a).exp();
        self.push(e, [a.0, NO_PARENT], [e, 0.0])
    }

    /// Natural log. Panics on non-positive input (domain error); composite
    /// losses clamp their probabilities before taking logs.
    pub fn log(&mut self, a: Var) -> Var {
        let x = self.data(a);
        assert!(x > 0.0, "log domain error: input {x} is not positive");
        self.push(x.ln(), [a.0, NO_PARENT], [1.0 / x, 0.0])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.data(a);
        if x > 0.0 {
            self.push(x, [a.0, NO_PARENT], [1.0, 0.0])
        } else {
            self.push(0.0, [a.0, NO_PARENT], [0.0, 0.0])
        }
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let x = self.data(a);
        // Evaluate on the side that avoids overflowing exp.
        let s = if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        };
        self.push(s, [a.0, NO_PARENT], [s * (1.0 - s), 0.0])
    }

    /// Elementwise max with subgradient assigned to the first argument on ties.
    pub fn max(&mut self, a: Var, b: Var) -> Var {
        let (da, db) = (self.data(a), self.data(b));
        if da >= db {
            self.push(da, [a.0, b.0], [1.0, 0.0])
        } else {
            self.push(db, [a.0, b.0], [0.0, 1.0])
        }
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let (da, db) = (self.data(a), self.data(b));
        if da <= db {
            self.push(da, [a.0, b.0], [1.0, 0.0])
        } else {
            self.push(db, [a.0, b.0], [0.0, 1.0])
        }
    }

    /// `|x|` with subgradient 0 at the origin.
    pub fn abs(&mut self, a: Var) -> Var {
        let x = self.data(a);
        self.push(x.abs(), [a.0, NO_PARENT], [x.signum() * f64::from(x != 0.0), 0.0])
    }

    /// Gradient reversal: forward identity, backward `-alpha` times the
    /// upstream adjoint. With `alpha = 0` the input's subgraph receives no
    /// gradient at all.
    pub fn grad_reverse(&mut self, a: Var, alpha: f64) -> Var {
        debug_assert!(alpha >= 0.0, "grad_reverse expects alpha >= 0");
        self.push(self.data(a), [a.0, NO_PARENT], [-alpha, 0.0])
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        match xs {
            [] => self.value(0.0),
            [x] => *x,
            [first, rest @ ..] => {
                let mut acc = *first;
                for &x in rest {
                    acc = self.add(acc, x);
                }
                acc
            }
        }
    }

    pub fn mean(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "mean of empty slice");
        let s = self.sum(xs);
        self.affine(s, 1.0 / xs.len() as f64, 0.0)
    }

    pub fn dot(&mut self, a: &[Var], b: &[Var]) -> Var {
        assert_eq!(a.len(), b.len(), "dot length mismatch");
        let mut acc: Option<Var> = None;
        for (&x, &y) in a.iter().zip(b) {
            let p = self.mul(x, y);
            acc = Some(match acc {
                Some(s) => self.add(s, p),
                None => p,
            });
        }
        acc.unwrap_or_else(|| self.value(0.0))
    }

    /// `W x + b`, composed from scalar ops. `w` is row-major (rows × len(x)).
    pub fn matvec(&mut self, w: &[Vec<Var>], x: &[Var], b: &[Var]) -> Vec<Var> {
        assert_eq!(w.len(), b.len(), "matvec bias length mismatch");
        w.iter()
            .zip(b)
            .map(|(row, &bias)| {
                let d = self.dot(row, x);
                self.add(d, bias)
            })
            .collect()
    }

    /// Reverse sweep seeding `d(sink)/d(sink) = 1`. All grads on the tape are
    /// zeroed first; within the sweep, adjoints from multiple uses of a node
    /// accumulate additively.
    pub fn backward(&mut self, sink: Var) {
        for node in &mut self.nodes {
            node.grad = 0.0;
        }
        self.nodes[sink.0 as usize].grad = 1.0;
        for i in (0..=sink.0 as usize).rev() {
            let node = self.nodes[i];
            if node.grad == 0.0 {
                continue;
            }
            for k in 0..2 {
                let p = node.parents[k];
                if p != NO_PARENT {
                    self.nodes[p as usize].grad += node.local[k] * node.grad;
                }
            }
        }
    }
}

/// Gradient-reversal warm-up schedule:
/// `alpha_max * (2 / (1 + exp(-gamma * progress)) - 1)`.
///
/// Zero at `progress = 0`, monotone nondecreasing, approaching `alpha_max`
/// as `progress -> 1` for large `gamma`.
pub fn alpha_schedule(progress: f64, alpha_max: f64, gamma: f64) -> f64 {
    assert!(
        (0.0..=1.0).contains(&progress),
        "progress must lie in [0,1], got {progress}"
    );
    alpha_max * (2.0 / (1.0 + (-gamma * progress).exp()) - 1.0)
}

pub const DEFAULT_ALPHA_MAX: f64 = 1.0;
pub const DEFAULT_GAMMA: f64 = 10.0;

/// Vanilla SGD: `w -= lr * grad`, then zero the grads.
pub fn sgd_step(tape: &mut Tape, params: &[Var], lr: f64) {
    for &p in params {
        let node = &mut tape.nodes[p.0 as usize];
        node.data -= lr * node.grad;
        node.grad = 0.0;
    }
}

/// Adam state for one fixed parameter list.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Adam {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// One Adam update with bias correction; grads are zeroed afterwards.
    pub fn step(
        &mut self,
        tape: &mut Tape,
        params: &[Var],
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) {
        assert_eq!(params.len(), self.m.len(), "Adam state size mismatch");
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (k, &p) in params.iter().enumerate() {
            let node = &mut tape.nodes[p.0 as usize];
            let g = node.grad;
            self.m[k] = beta1 * self.m[k] + (1.0 - beta1) * g;
            self.v[k] = beta2 * self.v[k] + (1.0 - beta2) * g * g;
            let m_hat = self.m[k] / bc1;
            let v_hat = self.v[k] / bc2;
            node.data -= lr * m_hat / (v_hat.sqrt() + eps);
            node.grad = 0.0;
        }
    }
}

/// Output nonlinearity of an [`Mlp`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Identity,
    Sigmoid,
    Softmax,
}

/// Fully connected network: ReLU on hidden layers, configurable output head.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub head: Head,
    /// Row-major weight matrices, one per layer, each rows × fan_in.
    weights: Vec<Vec<Vec<Var>>>,
    biases: Vec<Vec<Var>>,
}

impl Mlp {
    /// Allocates parameters on `tape` with Glorot-uniform init from `rng`.
    /// `sizes` lists layer widths from input to output, so `sizes.len() >= 2`.
    pub fn new(tape: &mut Tape, sizes: &[usize], head: Head, rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "Mlp needs at least input and output sizes");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<Vec<Var>> = (0..fan_out)
                .map(|_| {
                    (0..fan_in)
                        .map(|_| {
                            let x = rng.random_range(-bound..bound);
                            tape.value(x)
                        })
                        .collect()
                })
                .collect();
            let b: Vec<Var> = (0..fan_out).map(|_| tape.value(0.0)).collect();
            weights.push(w);
            biases.push(b);
        }
        Mlp {
            sizes: sizes.to_vec(),
            head,
            weights,
            biases,
        }
    }

    /// Total parameter count: sum over layers of `(fan_in + 1) * fan_out`.
    pub fn param_count(&self) -> usize {
        self.sizes
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    /// All parameter handles in a fixed order (weights row-major, then biases,
    /// layer by layer).
    pub fn params(&self) -> Vec<Var> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for row in w {
                out.extend_from_slice(row);
            }
            out.extend_from_slice(b);
        }
        out
    }

    pub fn forward(&self, tape: &mut Tape, x: &[Var]) -> Vec<Var> {
        assert_eq!(
            x.len(),
            self.sizes[0],
            "Mlp input size mismatch: got {}, expected {}",
            x.len(),
            self.sizes[0]
        );
        let n_layers = self.weights.len();
        let mut h: Vec<Var> = x.to_vec();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = tape.matvec(w, &h, b);
            if l + 1 < n_layers {
                z = z.iter().map(|&v| tape.relu(v)).collect();
            }
            h = z;
        }
        match self.head {
            Head::Identity => h,
            Head::Sigmoid => h.iter().map(|&v| tape.sigmoid(v)).collect(),
            Head::Softmax => softmax(tape, &h),
        }
    }

    /// Current parameter values in [`Mlp::params`] order.
    pub fn state(&self, tape: &Tape) -> Vec<f64> {
        self.params().iter().map(|&p| tape.data(p)).collect()
    }

    pub fn set_state(&self, tape: &mut Tape, state: &[f64]) {
        let params = self.params();
        assert_eq!(params.len(), state.len(), "state length mismatch");
        for (&p, &x) in params.iter().zip(state) {
            tape.set_data(p, x);
        }
    }
}

/// Numerically stable softmax (max-subtraction).
pub fn softmax(tape: &mut Tape, xs: &[Var]) -> Vec<Var> {
    assert!(!xs.is_empty(), "softmax of empty slice");
    let mut m = xs[0];
    for &x in &xs[1..] {
        m = tape.max(m, x);
    }
    let exps: Vec<Var> = xs
        .iter()
        .map(|&x| {
            let d = tape.sub(x, m);
            tape.exp(d)
        })
        .collect();
    let total = tape.sum(&exps);
    exps.iter().map(|&e| tape.div(e, total)).collect()
}

/// Result of checking one analytic gradient against central differences.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

/// Compares `grad` (analytic d f / d x_i) against central finite differences
/// of `f` at `x`. Coordinates where the two one-sided slopes disagree at
/// discontinuity scale (ReLU/abs/max kinks) are skipped rather than scored.
pub fn check_gradients(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    grad: &[f64],
    h: f64,
) -> GradCheckReport {
    assert_eq!(x.len(), grad.len());
    let mut xs = x.to_vec();
    let mut report = GradCheckReport {
        checked: 0,
        skipped_kinks: 0,
        max_rel_err: 0.0,
        worst_index: 0,
    };
    for i in 0..xs.len() {
        let x0 = xs[i];
        xs[i] = x0 + h;
        let f_plus = f(&xs);
        xs[i] = x0 - h;
        let f_minus = f(&xs);
        xs[i] = x0;
        let f_mid = f(&xs);

        let slope_plus = (f_plus - f_mid) / h;
        let slope_minus = (f_mid - f_minus) / h;
        let scale = slope_plus.abs().max(slope_minus.abs()).max(1.0);
        if (slope_plus - slope_minus).abs() > 1e-2 * scale {
            report.skipped_kinks += 1;
            continue;
        }

        let fd = (f_plus - f_minus) / (2.0 * h);
        let denom = grad[i].abs().max(fd.abs()).max(1e-6);
        let rel = (grad[i] - fd).abs() / denom;
        report.checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
    }
    report
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint blob: {0}")]
    Blob(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct MlpRecord {
    name: String,
    sizes: Vec<usize>,
    head: Head,
    /// Base64 of the parameters as little-endian f32, in [`Mlp::params`] order.
    params: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    mlps: Vec<MlpRecord>,
}

fn encode_params(values: &[f64]) -> String {
    use base64::Engine;
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn decode_params(blob: &str) -> Result<Vec<f64>, CheckpointError> {
    use base64::Engine;
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(blob)
        .map_err(|e| CheckpointError::Blob(e.to_string()))?;
    if bytes.len() % 4 != 0 {
        return Err(CheckpointError::Blob(format!(
            "parameter blob length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Writes named MLPs to a JSON checkpoint (sizes + f32 parameter blob).
/// Parameters pass through f32, so reloading rounds to f32 precision.
pub fn save_checkpoint(
    path: &std::path::Path,
    tape: &Tape,
    mlps: &[(&str, &Mlp)],
) -> Result<(), CheckpointError> {
    let file = CheckpointFile {
        mlps: mlps
            .iter()
            .map(|(name, mlp)| MlpRecord {
                name: (*name).to_string(),
                sizes: mlp.sizes.clone(),
                head: mlp.head,
                params: encode_params(&mlp.state(tape)),
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, json)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`], allocating fresh
/// parameters on `tape`.
pub fn load_checkpoint(
    path: &std::path::Path,
    tape: &mut Tape,
) -> Result<Vec<(String, Mlp)>, CheckpointError> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    let mut out = Vec::new();
    for rec in file.mlps {
        let values = decode_params(&rec.params)?;
        // Initialize with a throwaway RNG, then overwrite from the blob.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(tape, &rec.sizes, rec.head, &mut rng);
        if values.len() != mlp.param_count() {
            return Err(CheckpointError::Blob(format!(
                "mlp '{}' expects {} parameters, blob holds {}",
                rec.name,
                mlp.param_count(),
                values.len()
            )));
        }
        mlp.set_state(tape, &values);
        out.push((rec.name, mlp));
    }
    Ok(out)
}
