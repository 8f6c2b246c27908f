//! Declarative network descriptions, their resolved per-layer plans, and
//! exact parameter / FLOP accounting.

mod cost;
mod plan;
pub mod presets;

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::topology::{TopologyError, TopologyKind};

pub use cost::{analyze, compare_topologies, comparison_csv, CostEntry, CostReport};
pub use plan::{
    plan_network, FeatureShape, HeadPlan, LayerPlan, NetworkPlan, Op, ProjectionPlan, ScopePlan,
    StemPlan, TransitionPlan,
};

#[derive(Debug, Error)]
pub enum ArchError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("topology {0} cannot be compiled into a network (only used for edge counting)")]
    UnsupportedTopology(TopologyKind),
    #[error("width mismatch: {0}")]
    WidthMismatch(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("failed to read spec {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse spec: {0}")]
    Json(#[from] serde_json::Error),
}

/// Aggregation operator family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Element-wise sum (ResNet style).
    Sum,
    /// Channel concatenation (DenseNet style).
    Concat,
    /// Element-wise mean (FractalNet style join).
    Average,
}

/// Composition order inside every functional unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnitOrder {
    /// BatchNorm -> ReLU -> Conv.
    #[default]
    PreActivation,
    /// Conv -> BatchNorm -> ReLU.
    PostActivation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// ImageNet-style stem: conv -> BN -> ReLU -> 3x3 stride-2 max-pool.
    #[serde(default)]
    pub max_pool: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub num_layers: usize,
    /// Channels added per layer (concat) or block width (sum / average).
    pub growth_rate: usize,
    /// Spatial subsampling applied when leaving the block.
    #[serde(default = "default_stride")]
    pub spatial_stride_out: usize,
}

fn default_stride() -> usize {
    2
}

fn default_compression() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub family: Family,
    pub topology: TopologyKind,
    pub blocks: Vec<BlockSpec>,
    pub stem: StemSpec,
    pub num_classes: usize,
    #[serde(default)]
    pub bottleneck: bool,
    #[serde(default = "default_compression")]
    pub compression: f64,
    pub input: InputSpec,
    #[serde(default)]
    pub unit_order: UnitOrder,
    /// Sum / average families only: let aggregation links cross block
    /// boundaries through 1x1 projections. When off, each block is its own
    /// aggregation scope and blocks are joined by transitions.
    #[serde(default = "default_true")]
    pub cross_block_links: bool,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<(), ArchError> {
        let bad = |msg: String| Err(ArchError::InvalidSpec(msg));
        self.topology.validate()?;
        if self.blocks.is_empty() {
            return bad("at least one block is required".into());
        }
        for (i, block) in self.blocks.iter().enumerate() {
            if block.num_layers == 0 {
                return bad(format!("block {} has no layers", i + 1));
            }
            if block.growth_rate == 0 {
                return bad(format!("block {} has zero growth rate / width", i + 1));
            }
            if block.spatial_stride_out == 0 {
                return bad(format!("block {} has zero output stride", i + 1));
            }
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return bad(format!(
                "compression {} is outside (0, 1]",
                self.compression
            ));
        }
        if !self.bottleneck && self.compression != 1.0 {
            return bad("compression below 1 requires the bottleneck (BC) structure".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        let InputSpec {
            height,
            width,
            channels,
        } = self.input;
        if height == 0 || width == 0 || channels == 0 {
            return bad("input dimensions must be positive".into());
        }
        if self.stem.out_channels == 0 || self.stem.kernel == 0 || self.stem.stride == 0 {
            return bad("stem channels, kernel and stride must be positive".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ArchError> {
        let spec: NetworkSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self, ArchError> {
        let text = std::fs::read_to_string(path).map_err(|source| ArchError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn with_topology(&self, topology: TopologyKind) -> Self {
        NetworkSpec {
            topology,
            ..self.clone()
        }
    }

    pub fn total_layers(&self) -> usize {
        self.blocks.iter().map(|b| b.num_layers).sum()
    }
}
