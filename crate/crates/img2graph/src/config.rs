//! Shared configuration file schema for the command-line tool.
//!
//! The format is TOML with one table per pipeline stage and flat keys
//! inside. Every key is optional and falls back to the documented default,
//! so an empty file (or no file) is a valid configuration. Unknown keys are
//! rejected by name. The fully resolved configuration is embedded into
//! every artifact the tool writes, so outputs carry their provenance.

use crate::loss::LossWeights;
use crate::metrics::{
    iou_threshold_range, iou_threshold_two_point, MetricConfig, TopoConfig,
};
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Schema(String),
}

/// Dataset generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub seed: u64,
    pub samples: usize,
    pub dims: usize,
    /// "grid" or "tree".
    pub style: String,
    pub size_2d: usize,
    pub size_3d: usize,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        SyntheticSection {
            seed: 0,
            samples: 8,
            dims: 2,
            style: "tree".into(),
            size_2d: 64,
            size_3d: 32,
        }
    }
}

/// Patch extraction and graph cleanup parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSection {
    pub patch_size: usize,
    pub stride: usize,
    /// Degree-2 nodes straighter than this angle (degrees) are spliced out.
    pub prune_threshold_deg: f64,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        PreprocessSection {
            patch_size: 64,
            stride: 64,
            prune_threshold_deg: crate::data::DEFAULT_PRUNE_THRESHOLD_DEG,
        }
    }
}

/// 2D-to-3D lifting parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionSection {
    pub seed: u64,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for ProjectionSection {
    fn default() -> Self {
        ProjectionSection {
            seed: 0,
            depth: 32,
            height: 32,
            width: 32,
        }
    }
}

/// Relation pair sampling parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSection {
    pub ratio: f64,
    pub seed: u64,
    /// When set, use the fixed-budget sampler with this total instead of
    /// the ratio-regularized one.
    pub budget: Option<usize>,
}

impl Default for SamplingSection {
    fn default() -> Self {
        SamplingSection {
            ratio: crate::sampling::DEFAULT_RATIO,
            seed: 0,
            budget: None,
        }
    }
}

/// Matching and single-sample loss parameters. Weight defaults are the 2D
/// values; set them explicitly for 3D data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub weights: LossWeights,
    pub reslt_mean: bool,
    /// Half-extent of the box synthesized around each ground-truth node.
    pub box_half: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            weights: LossWeights::for_dims(2),
            reslt_mean: false,
            box_half: crate::metrics::DEFAULT_NODE_BOX_HALF,
        }
    }
}

/// Evaluation parameters; flat keys, topology ones prefixed `topo_`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub smd_points: usize,
    pub smd_seed: u64,
    pub node_box_half: f64,
    pub edge_min_extent: f64,
    /// Use the two-point {0.5, 0.95} threshold set instead of 0.50:0.05:0.95.
    pub two_point: bool,
    pub topo_hole_spacing: f64,
    pub topo_match_radius: f64,
    pub topo_seed_interval: f64,
    pub topo_crawl_radius: f64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        let t = TopoConfig::default();
        MetricsSection {
            smd_points: crate::metrics::DEFAULT_SMD_POINTS,
            smd_seed: 0,
            node_box_half: crate::metrics::DEFAULT_NODE_BOX_HALF,
            edge_min_extent: crate::metrics::DEFAULT_EDGE_MIN_EXTENT,
            two_point: false,
            topo_hole_spacing: t.hole_spacing,
            topo_match_radius: t.match_radius,
            topo_seed_interval: t.seed_interval,
            topo_crawl_radius: t.crawl_radius,
        }
    }
}

impl MetricsSection {
    pub fn to_metric_config(&self) -> MetricConfig {
        MetricConfig {
            smd_points: self.smd_points,
            smd_seed: self.smd_seed,
            node_box_half: self.node_box_half,
            edge_min_extent: self.edge_min_extent,
            iou_thresholds: if self.two_point {
                iou_threshold_two_point()
            } else {
                iou_threshold_range()
            },
            topo: TopoConfig {
                hole_spacing: self.topo_hole_spacing,
                match_radius: self.topo_match_radius,
                seed_interval: self.topo_seed_interval,
                crawl_radius: self.topo_crawl_radius,
            },
        }
    }
}

/// Dataset locations for the training subcommands; flags override these.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub source: Option<String>,
    pub target: Option<String>,
    pub eval: Option<String>,
}

/// Ablation grid shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub seeds: Vec<u64>,
    /// "standard" (sampler/adversary/pretraining toggles) or "ratio".
    pub mode: String,
    /// Sweep values for the "ratio" mode.
    pub ratios: Vec<f64>,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            seeds: vec![0, 1, 2, 3, 4],
            mode: "standard".into(),
            ratios: vec![0.05, 0.1, 0.15, 0.2, 0.4, 0.8],
        }
    }
}

/// The full configuration: one table per stage.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Worker cap for data-parallel sample processing; 0 = one per core.
    pub jobs: usize,
    pub paths: PathsSection,
    pub synthetic: SyntheticSection,
    pub preprocess: PreprocessSection,
    pub projection: ProjectionSection,
    pub sampling: SamplingSection,
    pub loss: LossSection,
    pub metrics: MetricsSection,
    pub train: TrainConfig,
    pub ablate: AblateSection,
}

impl Config {
    /// Parses a TOML string, rejecting unknown keys by name.
    pub fn from_toml(text: &str) -> Result<Config, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Schema(e.message().to_string()))
    }

    /// Loads a config file; `None` yields the defaults.
    pub fn load(path: Option<&Path>) -> Result<Config, ConfigError> {
        match path {
            None => Ok(Config::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.display().to_string(),
                    source,
                })?;
                Config::from_toml(&text)
            }
        }
    }
}
