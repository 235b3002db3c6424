//! Desk-scale end-to-end trainer: a small token-based predictor trained with
//! the combined objective on synthetic data, optionally jointly pretrained
//! on a second domain with the adversarial losses active, then fine-tuned.
//!
//! The model reads a 2D image as a 4x4 grid of cells. Each cell is mean-
//! pooled to 4x4 values and embedded by a shared MLP; the cell features are
//! what the image-level adversary sees. The concatenated features feed a
//! trunk that emits `n_tokens` token embeddings; shared readout heads turn
//! each token into a box center and an existence probability, and each token
//! pair into a relation probability. Tokens are anchored to a square grid
//! and regress a bounded offset from their anchor, which keeps the matching
//! problem local and learnable at this scale. Token embeddings plus
//! pairwise-mean relation embeddings form the token matrix for the
//! graph-level adversary.
//!
//! Tokens carry a fixed box half-extent: nodes are points, so boxes exist
//! only to drive matching and metrics, and only centers are regressed.

use crate::autodiff::{
    alpha_schedule, save_checkpoint, Adam, CheckpointError, Head, Mlp, Tape, Var,
};
use crate::data::Sample;
use crate::graph::{BoundingBox, SpatialGraph};
use crate::loss::{
    combined_loss_parts, da_forward, BoxVar, DaBatchViews, DaTerm, LossError, LossWeights,
    PredVarSet, SampleLossInputs,
};
use crate::matching::{cost_matrix, hungarian, MatchError, MatchWeights, PredictionSet, RelProb};
use crate::metrics::{compute_report, MetricConfig, MetricError, MetricReport, SampleMetricsRow, ScoredGraph};
use crate::sampling::{
    enumerate_edges, fixed_budget_sample, regularized_sample, EdgeSampleSet, SamplingError,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

/// Cells per image axis.
const GRID: usize = 4;
/// Pooled values per cell axis.
const POOL: usize = 8;
/// Cell feature width.
const FEAT: usize = 8;
/// Trunk hidden width.
const HIDDEN: usize = 48;
/// Token embedding width.
const TOK_D: usize = 6;
/// Width of the window a token's center can move across, centered on its
/// anchor. Half a cell of overlap with each neighbor at 16 tokens.
const ANCHOR_REACH: f64 = 0.5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset '{0}' must not be empty for the requested phases")]
    EmptyDataset(&'static str),
    #[error("bad train config: {0}")]
    BadConfig(String),
    #[error("image not poolable: {0}")]
    BadImage(String),
    #[error("loss became non-finite in {phase} epoch {epoch}")]
    NumericFailure { phase: &'static str, epoch: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Training hyperparameters. Defaults are desk scale: they train in seconds
/// per run on one core.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Joint pretraining epochs over source plus target; 0 skips the phase.
    pub pretrain_epochs: usize,
    /// Target-only fine-tuning epochs.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weights: LossWeights,
    /// Active/background ratio for the regularized relation sampler.
    pub ratio: f64,
    /// Mean-normalize the relation loss instead of summing.
    pub reslt_mean: bool,
    /// When false, fall back to the fixed-budget sampler.
    pub use_reslt: bool,
    /// Background pairs added on top of the active set by the fallback.
    pub fixed_background: usize,
    /// Run the adversarial block during pretraining.
    pub use_da: bool,
    pub alpha_max: f64,
    pub gamma: f64,
    pub n_tokens: usize,
    /// Fixed half-extent of every predicted and target node box.
    pub box_half: f64,
    pub cls_threshold: f64,
    pub rel_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            pretrain_epochs: 0,
            epochs: 30,
            batch_size: 8,
            lr: 4e-3,
            weights: LossWeights::for_dims(2),
            ratio: crate::sampling::DEFAULT_RATIO,
            reslt_mean: false,
            use_reslt: true,
            fixed_background: 32,
            use_da: false,
            alpha_max: crate::autodiff::DEFAULT_ALPHA_MAX,
            gamma: crate::autodiff::DEFAULT_GAMMA,
            n_tokens: 16,
            box_half: crate::metrics::DEFAULT_NODE_BOX_HALF,
            cls_threshold: 0.5,
            rel_threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::BadConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be >= 1".into()));
        }
        if self.n_tokens < 2 {
            return Err(TrainError::BadConfig("n_tokens must be >= 2".into()));
        }
        if !(self.box_half > 0.0) {
            return Err(TrainError::BadConfig("box_half must be positive".into()));
        }
        self.weights.validate()?;
        Ok(())
    }
}

/// The toy predictor. All parameters live on one tape.
#[derive(Debug)]
pub struct ToyModel {
    pub cell_embed: Mlp,
    pub trunk: Mlp,
    pub obj_head: Mlp,
    pub rel_head: Mlp,
    pub img_adversary: Mlp,
    pub graph_adversary: Mlp,
    pub n_tokens: usize,
    pub dims: usize,
    pub box_half: f64,
}

/// Everything one forward pass produces for a sample.
pub struct ModelOutput {
    pub pred: PredVarSet,
    /// One feature vector per image cell, for the image adversary.
    pub patch_feats: Vec<Vec<Var>>,
    /// Token embeddings, one row per object token.
    pub obj_tokens: Vec<Vec<Var>>,
}

impl ToyModel {
    pub fn new(tape: &mut Tape, n_tokens: usize, box_half: f64, rng: &mut ChaCha8Rng) -> Self {
        let cell_in = POOL * POOL;
        ToyModel {
            cell_embed: Mlp::new(tape, &[cell_in, FEAT], Head::Identity, rng),
            trunk: Mlp::new(
                tape,
                &[GRID * GRID * FEAT, HIDDEN, n_tokens * TOK_D],
                Head::Identity,
                rng,
            ),
            obj_head: Mlp::new(tape, &[TOK_D + cell_in, 24, 3], Head::Identity, rng),
            rel_head: Mlp::new(tape, &[2 * TOK_D + 4 + 3, 12, 1], Head::Identity, rng),
            img_adversary: Mlp::new(tape, &[FEAT, 1], Head::Sigmoid, rng),
            graph_adversary: Mlp::new(tape, &[TOK_D, 1], Head::Sigmoid, rng),
            n_tokens,
            dims: 2,
            box_half,
        }
    }

    /// All trainable parameters, adversaries included.
    pub fn params(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for mlp in [
            &self.cell_embed,
            &self.trunk,
            &self.obj_head,
            &self.rel_head,
            &self.img_adversary,
            &self.graph_adversary,
        ] {
            out.extend(mlp.params());
        }
        out
    }

    /// Anchor positions for `n` tokens: centers of the first `n` cells of
    /// the smallest square grid with at least `n` cells, row-major. Each
    /// token regresses an offset from its anchor, so localization is a
    /// local problem per token instead of a global assignment problem.
    pub fn token_anchors(n: usize) -> Vec<[f64; 2]> {
        let k = (1..).find(|k| k * k >= n).unwrap();
        (0..n)
            .map(|i| {
                let (row, col) = (i / k, i % k);
                [
                    (row as f64 + 0.5) / k as f64,
                    (col as f64 + 0.5) / k as f64,
                ]
            })
            .collect()
    }

    /// Nearest pooled mean at normalized position `(y, x)`, read from the
    /// flattened (GRID*POOL)^2 mean map that [`Self::pool_cells`] produces.
    fn mean_at(cells: &[Vec<f64>], y: f64, x: f64) -> f64 {
        let side = GRID * POOL;
        let to_idx = |c: f64| (((c * side as f64) as isize).max(0) as usize).min(side - 1);
        let (gy, gx) = (to_idx(y), to_idx(x));
        let cell = (gy / POOL) * GRID + gx / POOL;
        cells[cell][(gy % POOL) * POOL + gx % POOL]
    }

    /// Mean-pools an image into GRID x GRID cells of POOL x POOL values.
    /// Pure preprocessing: the result enters the tape as constants.
    pub fn pool_cells(image: &crate::data::ImagePatch) -> Result<Vec<Vec<f64>>, TrainError> {
        if image.dims != 2 {
            return Err(TrainError::BadImage(format!(
                "expected a 2D image, got {}D",
                image.dims
            )));
        }
        let step = GRID * POOL;
        if image.shape.iter().any(|&s| s == 0 || s % step != 0) {
            return Err(TrainError::BadImage(format!(
                "shape {:?} not divisible into a {GRID}x{GRID} grid of {POOL}x{POOL} pools",
                image.shape
            )));
        }
        let (rh, rw) = (image.shape[0] / step, image.shape[1] / step);
        let mut cells = Vec::with_capacity(GRID * GRID);
        for gy in 0..GRID {
            for gx in 0..GRID {
                let mut pooled = Vec::with_capacity(POOL * POOL);
                for py in 0..POOL {
                    for px in 0..POOL {
                        let y0 = (gy * POOL + py) * rh;
                        let x0 = (gx * POOL + px) * rw;
                        let mut acc = 0.0;
                        for dy in 0..rh {
                            for dx in 0..rw {
                                acc += image.get(&[y0 + dy, x0 + dx]) as f64;
                            }
                        }
                        pooled.push(acc / (rh * rw) as f64);
                    }
                }
                cells.push(pooled);
            }
        }
        Ok(cells)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        image: &crate::data::ImagePatch,
    ) -> Result<ModelOutput, TrainError> {
        let cells = Self::pool_cells(image)?;
        let mut cell_inputs = Vec::with_capacity(cells.len());
        let mut patch_feats = Vec::with_capacity(cells.len());
        let mut flat = Vec::with_capacity(cells.len() * FEAT);
        for cell in &cells {
            let inputs: Vec<Var> = cell.iter().map(|&v| tape.value(v)).collect();
            let feat = self.cell_embed.forward(tape, &inputs);
            flat.extend_from_slice(&feat);
            patch_feats.push(feat);
            cell_inputs.push(inputs);
        }
        let trunk_out = self.trunk.forward(tape, &flat);
        let obj_tokens: Vec<Vec<Var>> = (0..self.n_tokens)
            .map(|i| trunk_out[i * TOK_D..(i + 1) * TOK_D].to_vec())
            .collect();

        let anchors = Self::token_anchors(self.n_tokens);
        let mut boxes = Vec::with_capacity(self.n_tokens);
        let mut cls_prob = Vec::with_capacity(self.n_tokens);
        for (tok, anchor) in obj_tokens.iter().zip(&anchors) {
            // The head reads the raw means of the cell under the anchor, so
            // sub-cell localization rests on local evidence rather than on
            // what survives the trunk bottleneck.
            let row = ((anchor[0] * GRID as f64) as usize).min(GRID - 1);
            let col = ((anchor[1] * GRID as f64) as usize).min(GRID - 1);
            let mut head_in = tok.clone();
            head_in.extend_from_slice(&cell_inputs[row * GRID + col]);
            let out = self.obj_head.forward(tape, &head_in);
            let center = (0..2)
                .map(|d| {
                    let s = tape.sigmoid(out[d]);
                    tape.affine(s, ANCHOR_REACH, anchor[d] - ANCHOR_REACH / 2.0)
                })
                .collect();
            let extent = vec![tape.value(self.box_half), tape.value(self.box_half)];
            boxes.push(BoxVar { center, extent });
            cls_prob.push(tape.sigmoid(out[2]));
        }
        // Relation head input: both token embeddings, both predicted
        // centers, and image brightness sampled along the straight path
        // between the two anchors. A rendered edge leaves a bright trail on
        // that path, which is the decisive local cue for adjacency.
        let mut rel_prob = BTreeMap::new();
        for i in 0..self.n_tokens {
            for j in (i + 1)..self.n_tokens {
                let mut input = obj_tokens[i].clone();
                input.extend_from_slice(&obj_tokens[j]);
                input.extend_from_slice(&boxes[i].center);
                input.extend_from_slice(&boxes[j].center);
                for &t in &[0.25, 0.5, 0.75] {
                    let y = anchors[i][0] + t * (anchors[j][0] - anchors[i][0]);
                    let x = anchors[i][1] + t * (anchors[j][1] - anchors[i][1]);
                    let v = Self::mean_at(&cells, y, x);
                    input.push(tape.value(v));
                }
                let out = self.rel_head.forward(tape, &input);
                rel_prob.insert((i, j), tape.sigmoid(out[0]));
            }
        }
        Ok(ModelOutput {
            pred: PredVarSet {
                boxes,
                cls_prob,
                rel_prob,
            },
            patch_feats,
            obj_tokens,
        })
    }

    /// Token matrix for the graph adversary: object embeddings plus a
    /// pairwise-mean embedding per token pair.
    fn token_matrix(&self, tape: &mut Tape, obj_tokens: &[Vec<Var>]) -> Vec<Vec<Var>> {
        let mut rows = obj_tokens.to_vec();
        for i in 0..obj_tokens.len() {
            for j in (i + 1)..obj_tokens.len() {
                let row: Vec<Var> = (0..TOK_D)
                    .map(|d| {
                        let s = tape.add(obj_tokens[i][d], obj_tokens[j][d]);
                        tape.affine(s, 0.5, 0.0)
                    })
                    .collect();
                rows.push(row);
            }
        }
        rows
    }

    pub fn save(&self, path: &Path, tape: &Tape) -> Result<(), CheckpointError> {
        save_checkpoint(
            path,
            tape,
            &[
                ("cell_embed", &self.cell_embed),
                ("trunk", &self.trunk),
                ("obj_head", &self.obj_head),
                ("rel_head", &self.rel_head),
                ("img_adversary", &self.img_adversary),
                ("graph_adversary", &self.graph_adversary),
            ],
        )
    }

    /// Rebuilds a model from a checkpoint onto a fresh tape. The token count
    /// is recovered from the trunk shape; `box_half` is not stored and must
    /// be supplied.
    pub fn load(path: &Path, tape: &mut Tape, box_half: f64) -> Result<Self, TrainError> {
        let mlps = crate::autodiff::load_checkpoint(path, tape)?;
        let mut by_name: BTreeMap<String, Mlp> = mlps.into_iter().collect();
        let mut take = |name: &str| -> Result<Mlp, TrainError> {
            by_name
                .remove(name)
                .ok_or_else(|| TrainError::BadConfig(format!("checkpoint missing mlp '{name}'")))
        };
        let cell_embed = take("cell_embed")?;
        let trunk = take("trunk")?;
        let obj_head = take("obj_head")?;
        let rel_head = take("rel_head")?;
        let img_adversary = take("img_adversary")?;
        let graph_adversary = take("graph_adversary")?;
        let n_tokens = trunk.sizes.last().unwrap() / TOK_D;
        Ok(ToyModel {
            cell_embed,
            trunk,
            obj_head,
            rel_head,
            img_adversary,
            graph_adversary,
            n_tokens,
            dims: 2,
            box_half,
        })
    }
}

/// Fixed-extent target box around each ground-truth node. Unclipped: the
/// extent matches the predicted boxes, so only centers carry loss.
fn gt_node_boxes(g: &SpatialGraph, half: f64) -> Vec<BoundingBox> {
    g.nodes
        .iter()
        .map(|n| BoundingBox::new(n.clone(), vec![half; g.dims]))
        .collect()
}

/// Matches predicted tokens to ground-truth nodes using current predictions.
fn match_sample(
    tape: &Tape,
    pred: &PredVarSet,
    gt_boxes: &[BoundingBox],
    weights: &MatchWeights,
) -> Result<crate::matching::Matching, TrainError> {
    let boxes: Vec<BoundingBox> = pred
        .boxes
        .iter()
        .map(|b| {
            BoundingBox::new(
                b.center.iter().map(|&v| tape.data(v)).collect(),
                b.extent.iter().map(|&v| tape.data(v)).collect(),
            )
        })
        .collect();
    let cls: Vec<f64> = pred.cls_prob.iter().map(|&v| tape.data(v)).collect();
    let rel: Vec<RelProb> = pred
        .rel_prob
        .iter()
        .map(|(&pair, &v)| RelProb {
            pair,
            prob: tape.data(v),
        })
        .collect();
    let pset = PredictionSet {
        boxes,
        cls_prob: cls,
        rel_prob: rel,
    };
    let cost = cost_matrix(&pset, gt_boxes, weights);
    Ok(hungarian(&cost)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: String,
    pub epoch: usize,
    pub mean_loss: f64,
    pub alpha: f64,
}

/// Trained model, its tape, and the loss history.
pub struct TrainOutcome {
    pub tape: Tape,
    pub model: ToyModel,
    pub log: Vec<EpochLog>,
}

struct StepInputs<'a> {
    samples: Vec<&'a Sample>,
    /// Domain label per sample (0 source, 1 target).
    domains: Vec<f64>,
}

fn run_step(
    tape: &mut Tape,
    model: &ToyModel,
    cfg: &TrainConfig,
    step: &StepInputs,
    alpha: Option<f64>,
    sampler_seed: u64,
) -> Result<f64, TrainError> {
    let match_w = MatchWeights::for_dims(2);
    let mut outputs = Vec::with_capacity(step.samples.len());
    let mut gt_boxes = Vec::with_capacity(step.samples.len());
    let mut matchings = Vec::with_capacity(step.samples.len());
    for s in &step.samples {
        let out = model.forward(tape, &s.image)?;
        let gtb = gt_node_boxes(&s.graph, model.box_half);
        let m = match_sample(tape, &out.pred, &gtb, &match_w)?;
        outputs.push(out);
        gt_boxes.push(gtb);
        matchings.push(m);
    }

    let graphs: Vec<SpatialGraph> = step.samples.iter().map(|s| s.graph.clone()).collect();
    let (active, background) = enumerate_edges(&graphs);
    let sample_set: EdgeSampleSet = if cfg.use_reslt {
        regularized_sample(&active, &background, cfg.ratio, sampler_seed)?
    } else {
        let budget = active.len() + cfg.fixed_background.min(background.len());
        fixed_budget_sample(&active, &background, budget, sampler_seed)?
    };

    let da_terms: Option<Vec<DaTerm>> = match alpha {
        None => None,
        Some(a) => {
            let mut terms = Vec::with_capacity(outputs.len());
            for (out, &domain) in outputs.iter().zip(&step.domains) {
                let tokens = model.token_matrix(tape, &out.obj_tokens);
                let views = DaBatchViews {
                    image_patch_features: out.patch_feats.clone(),
                    graph_tokens: tokens,
                    domain,
                };
                terms.push(da_forward(
                    tape,
                    &views,
                    &model.img_adversary,
                    &model.graph_adversary,
                    a,
                )?);
            }
            Some(terms)
        }
    };

    let inputs: Vec<SampleLossInputs> = outputs
        .iter()
        .zip(&gt_boxes)
        .zip(&matchings)
        .map(|((out, gtb), m)| SampleLossInputs {
            pred: &out.pred,
            gt_boxes: gtb,
            matching: m,
        })
        .collect();
    let parts = combined_loss_parts(
        tape,
        &inputs,
        &sample_set,
        da_terms.as_deref(),
        &cfg.weights,
        cfg.reslt_mean,
    )?;
    let scaled = tape.affine(parts.total, 1.0 / step.samples.len() as f64, 0.0);
    let loss = tape.data(scaled);
    tape.backward(scaled);
    Ok(loss)
}

/// Trains the toy model. Phase 1 (optional): joint batches alternating
/// source and target samples, adversarial losses on when configured, with
/// the reversal strength following the warm-up schedule. Phase 2:
/// target-only fine-tuning, adversaries off. Deterministic given the seed.
///
/// Batch order and relation-sampler draws come from a stream reseeded
/// identically at the start of every epoch, so each epoch runs the same
/// curriculum. A frozen model therefore produces a constant loss log, which
/// makes optimizer bugs visible as log drift.
pub fn train(
    cfg: &TrainConfig,
    source: &[Sample],
    target: &[Sample],
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if target.is_empty() {
        return Err(TrainError::EmptyDataset("target"));
    }
    if cfg.pretrain_epochs > 0 && source.is_empty() {
        return Err(TrainError::EmptyDataset("source"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tape = Tape::new();
    let model = ToyModel::new(&mut tape, cfg.n_tokens, cfg.box_half, &mut rng);
    let params = model.params();
    let mut adam = Adam::new(params.len());
    let mark = tape.mark();
    let mut log = Vec::new();

    // Phase 1: joint pretraining over alternating source/target samples.
    if cfg.pretrain_epochs > 0 {
        let steps_per_epoch = source.len().max(target.len()).div_ceil(cfg.batch_size).max(1);
        let total_steps = (cfg.pretrain_epochs * steps_per_epoch).max(1);
        let mut step_idx = 0usize;
        for epoch in 0..cfg.pretrain_epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
            let mut src_order: Vec<usize> = (0..source.len()).collect();
            let mut tgt_order: Vec<usize> = (0..target.len()).collect();
            src_order.shuffle(&mut rng);
            tgt_order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            let mut last_alpha = 0.0;
            for s in 0..steps_per_epoch {
                let mut samples = Vec::with_capacity(cfg.batch_size);
                let mut domains = Vec::with_capacity(cfg.batch_size);
                for k in 0..cfg.batch_size {
                    let pick = s * cfg.batch_size + k;
                    if k % 2 == 0 {
                        samples.push(&source[src_order[pick / 2 % source.len()]]);
                        domains.push(0.0);
                    } else {
                        samples.push(&target[tgt_order[pick / 2 % target.len()]]);
                        domains.push(1.0);
                    }
                }
                let progress = step_idx as f64 / (total_steps - 1).max(1) as f64;
                let alpha = if cfg.use_da {
                    Some(alpha_schedule(progress.min(1.0), cfg.alpha_max, cfg.gamma))
                } else {
                    None
                };
                last_alpha = alpha.unwrap_or(0.0);
                let sampler_seed = rng.random::<u64>();
                let step_in = StepInputs { samples, domains };
                let loss = run_step(&mut tape, &model, cfg, &step_in, alpha, sampler_seed)?;
                if !loss.is_finite() {
                    return Err(TrainError::NumericFailure {
                        phase: "pretrain",
                        epoch,
                    });
                }
                adam.step(&mut tape, &params, cfg.lr, 0.9, 0.999, 1e-8);
                tape.rewind(mark);
                epoch_loss += loss;
                step_idx += 1;
            }
            log.push(EpochLog {
                phase: "pretrain".into(),
                epoch,
                mean_loss: epoch_loss / steps_per_epoch as f64,
                alpha: last_alpha,
            });
        }
    }

    // Phase 2: target-only fine-tuning, adversaries off.
    let steps_per_epoch = target.len().div_ceil(cfg.batch_size).max(1);
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5851_f42d_4c95_7f2d);
        let mut order: Vec<usize> = (0..target.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for s in 0..steps_per_epoch {
            let lo = s * cfg.batch_size;
            let hi = (lo + cfg.batch_size).min(target.len());
            let samples: Vec<&Sample> = order[lo..hi].iter().map(|&i| &target[i]).collect();
            let domains = vec![1.0; samples.len()];
            let sampler_seed = rng.random::<u64>();
            let step_in = StepInputs { samples, domains };
            let loss = run_step(&mut tape, &model, cfg, &step_in, None, sampler_seed)?;
            if !loss.is_finite() {
                return Err(TrainError::NumericFailure {
                    phase: "finetune",
                    epoch,
                });
            }
            adam.step(&mut tape, &params, cfg.lr, 0.9, 0.999, 1e-8);
            tape.rewind(mark);
            epoch_loss += loss;
        }
        log.push(EpochLog {
            phase: "finetune".into(),
            epoch,
            mean_loss: epoch_loss / steps_per_epoch as f64,
            alpha: 0.0,
        });
    }

    Ok(TrainOutcome { tape, model, log })
}

/// Decodes a forward pass into a scored graph: tokens with existence
/// probability above the threshold become nodes; a relation above its
/// threshold between two kept tokens becomes an edge.
pub fn decode(
    tape: &mut Tape,
    model: &ToyModel,
    image: &crate::data::ImagePatch,
    cls_threshold: f64,
    rel_threshold: f64,
) -> Result<ScoredGraph, TrainError> {
    let mark = tape.mark();
    let out = model.forward(tape, image)?;
    let mut keep = Vec::new();
    let mut token_to_node = vec![usize::MAX; model.n_tokens];
    let mut nodes = Vec::new();
    let mut node_scores = Vec::new();
    for (i, &p) in out.pred.cls_prob.iter().enumerate() {
        let prob = tape.data(p);
        if prob > cls_threshold {
            token_to_node[i] = nodes.len();
            keep.push(i);
            nodes.push(
                out.pred.boxes[i]
                    .center
                    .iter()
                    .map(|&c| tape.data(c))
                    .collect::<Vec<f64>>(),
            );
            node_scores.push(prob);
        }
    }
    let mut edges = Vec::new();
    let mut edge_scores = Vec::new();
    for (&(i, j), &p) in &out.pred.rel_prob {
        if token_to_node[i] == usize::MAX || token_to_node[j] == usize::MAX {
            continue;
        }
        let prob = tape.data(p);
        if prob > rel_threshold {
            edges.push((token_to_node[i], token_to_node[j]));
            edge_scores.push(prob);
        }
    }
    tape.rewind(mark);
    Ok(ScoredGraph {
        graph: SpatialGraph::new(2, nodes, edges),
        node_scores,
        edge_scores,
    })
}

/// Evaluates an arbitrary decoder over a dataset (the test hook behind
/// [`evaluate`]).
pub fn evaluate_with<F>(
    mut decoder: F,
    dataset: &[Sample],
    mcfg: &MetricConfig,
) -> Result<(MetricReport, Vec<SampleMetricsRow>), TrainError>
where
    F: FnMut(&Sample) -> Result<ScoredGraph, TrainError>,
{
    let mut preds = Vec::with_capacity(dataset.len());
    for s in dataset {
        preds.push(decoder(s)?);
    }
    let gts: Vec<SpatialGraph> = dataset.iter().map(|s| s.graph.clone()).collect();
    Ok(compute_report(&preds, &gts, mcfg)?)
}

/// Decodes every sample with the model and scores the result.
pub fn evaluate(
    tape: &mut Tape,
    model: &ToyModel,
    cfg: &TrainConfig,
    dataset: &[Sample],
    mcfg: &MetricConfig,
) -> Result<(MetricReport, Vec<SampleMetricsRow>), TrainError> {
    evaluate_with(
        |s| decode(tape, model, &s.image, cfg.cls_threshold, cfg.rel_threshold),
        dataset,
        mcfg,
    )
}

/// One ablation grid entry: a named configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateEntry {
    pub name: String,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateRow {
    pub config: String,
    pub seed: u64,
    pub report: MetricReport,
}

/// Trains and evaluates every configuration for every seed; one row each,
/// in grid-major order.
pub fn ablate(
    entries: &[AblateEntry],
    seeds: &[u64],
    source: &[Sample],
    target: &[Sample],
    eval_set: &[Sample],
    mcfg: &MetricConfig,
) -> Result<Vec<AblateRow>, TrainError> {
    let mut rows = Vec::with_capacity(entries.len() * seeds.len());
    for entry in entries {
        for &seed in seeds {
            let cfg = TrainConfig {
                seed,
                ..entry.config.clone()
            };
            let mut outcome = train(&cfg, source, target)?;
            let (report, _) =
                evaluate(&mut outcome.tape, &outcome.model, &cfg, eval_set, mcfg)?;
            rows.push(AblateRow {
                config: entry.name.clone(),
                seed,
                report,
            });
        }
    }
    Ok(rows)
}

/// The standard ablation axes: relation sampling on/off, adversaries
/// on/off, pretraining on/off.
pub fn standard_grid(base: &TrainConfig) -> Vec<AblateEntry> {
    let mut entries = Vec::new();
    let pretrain = base.pretrain_epochs.max(1);
    entries.push(AblateEntry {
        name: "full".into(),
        config: TrainConfig {
            use_reslt: true,
            use_da: true,
            pretrain_epochs: pretrain,
            ..base.clone()
        },
    });
    entries.push(AblateEntry {
        name: "no_reslt".into(),
        config: TrainConfig {
            use_reslt: false,
            use_da: true,
            pretrain_epochs: pretrain,
            ..base.clone()
        },
    });
    entries.push(AblateEntry {
        name: "no_da".into(),
        config: TrainConfig {
            use_reslt: true,
            use_da: false,
            pretrain_epochs: pretrain,
            ..base.clone()
        },
    });
    entries.push(AblateEntry {
        name: "no_pretrain".into(),
        config: TrainConfig {
            use_reslt: true,
            use_da: false,
            pretrain_epochs: 0,
            ..base.clone()
        },
    });
    entries
}

/// Sweep over the sampling ratio, mirroring the r-ablation layout.
pub fn ratio_grid(base: &TrainConfig, ratios: &[f64]) -> Vec<AblateEntry> {
    ratios
        .iter()
        .map(|&r| AblateEntry {
            name: format!("r={r}"),
            config: TrainConfig {
                ratio: r,
                use_reslt: true,
                ..base.clone()
            },
        })
        .collect()
}
