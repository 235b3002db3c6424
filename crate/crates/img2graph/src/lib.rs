//! Components for transferring image-to-graph extraction models across
//! domains and across dimensionality (2D images to 3D volumes).
//!
//! The crate is organized as a set of small, independently testable modules:
//!
//! - [`graph`]: spatial graphs in the unit square/cube, axis-aligned boxes,
//!   validation and canonicalization.
//! - [`data`]: dataset I/O (graph JSON, raw image tensors, sample
//!   directories), patch extraction, near-collinear node pruning, and a
//!   seeded synthetic generator for road-grid and vessel-tree styles.
//! - [`sampling`]: ratio-regularized and fixed-budget edge sampling for
//!   relation supervision over batches.
//! - [`autodiff`]: a scalar reverse-mode tape with a gradient-reversal op,
//!   small MLPs, and SGD/Adam steps.
//! - [`matching`]: exact Hungarian assignment and the detection matching
//!   cost used to align predicted tokens with ground-truth nodes.
//! - [`loss`]: differentiable training losses (box L1, generalized IoU,
//!   relation and classification cross-entropies, image- and graph-level
//!   domain-adversarial terms, and their weighted combination).
//! - [`project3d`]: deterministic 2D-to-3D sample projection (resize, slice
//!   embedding, uniform random rotation).
//! - [`metrics`]: graph-quality metrics (street-mover distance, topology
//!   precision/recall, node and edge mAP/mAR).
//! - [`train`]: a small end-to-end trainer on synthetic data exercising the
//!   full pipeline, plus an ablation runner.
//! - [`config`] / [`cli`]: typed configuration and the command-line entry
//!   points used by the `img2graph` binary.
//!
//! Runnable demonstrations for each capability live in `examples/`.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod graph;
pub mod loss;
pub mod matching;
pub mod metrics;
pub mod project3d;
pub mod sampling;
pub mod train;

pub use graph::{BoundingBox, SpatialGraph};
