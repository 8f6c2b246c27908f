//! Feature-reuse heat maps.
//!
//! For every layer of a concatenating network, the first convolution of the
//! unit sees the aggregated inputs as consecutive channel ranges. Averaging
//! `|w|` over each range tells how strongly the layer draws on each source.
//! Entries are rescaled per row with min-max normalization; sources a layer
//! does not aggregate are marked absent.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::architecture::{Family, LayerPlan};
use crate::model::Network;
use crate::tensor::{Scalar, Tensor};

/// Name of the row normalization recorded in every report.
pub const NORMALIZATION: &str = "min-max";

/// CSV token for a source the target does not aggregate.
pub const ABSENT: &str = "absent";

/// Side length in pixels of one heat-map cell in PGM output.
pub const PGM_CELL: usize = 8;

#[derive(Debug, Error)]
pub enum IntrospectError {
    #[error("heat maps need a concatenating network: {0}")]
    Unsupported(String),
    #[error("parameter {0} is missing or has an unexpected shape")]
    Weights(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeatmapFormat {
    Csv,
    Pgm,
}

impl FromStr for HeatmapFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(HeatmapFormat::Csv),
            "pgm" => Ok(HeatmapFormat::Pgm),
            other => Err(format!(
                "unknown heat-map format {other:?} (expected csv or pgm)"
            )),
        }
    }
}

/// Heat map of one dense block.
///
/// `rows[i - 1][j]` is the normalized weight of target layer `i` on source
/// node `j` (node 0 is the block input), so the matrix has `n` rows and
/// `n + 1` columns for a block of `n` layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockHeatmap {
    pub block: usize,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl BlockHeatmap {
    pub fn num_layers(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, target: usize, source: usize) -> Option<f64> {
        self.rows
            .get(target.checked_sub(1)?)?
            .get(source)
            .copied()
            .flatten()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapReport {
    pub spec_hash: String,
    pub epoch: u64,
    pub normalization: String,
    pub blocks: Vec<BlockHeatmap>,
}

/// Mean absolute value of `kernel` (shape `O x C x K x K`) over each
/// consecutive input-channel range of the given widths.
pub fn slice_means<T: Scalar>(kernel: &Tensor<T>, widths: &[usize]) -> Option<Vec<f64>> {
    let &[out, cin, kh, kw] = kernel.shape() else {
        return None;
    };
    if widths.iter().sum::<usize>() != cin {
        return None;
    }
    let taps = kh * kw;
    let data = kernel.data();
    let mut means = Vec::with_capacity(widths.len());
    let mut start = 0;
    for &width in widths {
        let mut total = 0.0;
        for o in 0..out {
            let base = (o * cin + start) * taps;
            total += data[base..base + width * taps]
                .iter()
                .map(|v| v.as_f64().abs())
                .sum::<f64>();
        }
        let count = (out * width * taps).max(1);
        means.push(total / count as f64);
        start += width;
    }
    Some(means)
}

/// Min-max rescaling of the present entries; a constant row maps to all 1.
pub fn normalize_row(row: &mut [Option<f64>]) {
    let present = row.iter().flatten();
    let lo = present.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = present.copied().fold(f64::NEG_INFINITY, f64::max);
    for v in row.iter_mut().flatten() {
        *v = if hi > lo { (*v - lo) / (hi - lo) } else { 1.0 };
    }
}

fn layer_row<T: Scalar>(
    net: &Network<T>,
    layer: &LayerPlan,
    width: usize,
) -> Result<Vec<Option<f64>>, IntrospectError> {
    let name = format!("{}.conv0.weight", layer.name());
    let kernel = net
        .param(&name)
        .ok_or_else(|| IntrospectError::Weights(name.clone()))?;
    let means =
        slice_means(kernel, &layer.source_channels).ok_or(IntrospectError::Weights(name))?;
    let mut row = vec![None; width];
    for (&src, mean) in layer.sources.iter().zip(means) {
        row[src] = Some(mean);
    }
    normalize_row(&mut row);
    Ok(row)
}

/// Per-block heat maps of a concatenating network, trained or not.
///
/// For bottleneck units the sliced kernel is the 1x1 reduction, the only
/// one that reads the aggregated channels.
pub fn weight_heatmap<T: Scalar>(net: &Network<T>) -> Result<HeatmapReport, IntrospectError> {
    let family = net.spec().family;
    if family != Family::Concat {
        return Err(IntrospectError::Unsupported(format!(
            "{family:?} aggregation mixes sources, so per-source filter slices do not exist"
        )));
    }
    let mut blocks = Vec::new();
    for scope in &net.plan().scopes {
        let block = scope.blocks.first().copied().unwrap_or(scope.index + 1);
        let rows = scope
            .layers
            .iter()
            .map(|layer| layer_row(net, layer, scope.num_nodes))
            .collect::<Result<Vec<_>, _>>()?;
        blocks.push(BlockHeatmap { block, rows });
    }
    Ok(HeatmapReport {
        spec_hash: net.spec_hash().to_string(),
        epoch: net.epoch,
        normalization: NORMALIZATION.to_string(),
        blocks,
    })
}

impl HeatmapReport {
    /// Long-form CSV preceded by `#` metadata lines:
    /// `block,target,source,value`, one line per matrix cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# spec_hash={}", self.spec_hash);
        let _ = writeln!(out, "# epoch={}", self.epoch);
        let _ = writeln!(out, "# normalization={}", self.normalization);
        out.push_str("block,target,source,value\n");
        for block in &self.blocks {
            for (i, row) in block.rows.iter().enumerate() {
                for (j, cell) in row.iter().enumerate() {
                    let value = cell.map_or_else(|| ABSENT.to_string(), |v| v.to_string());
                    let _ = writeln!(out, "{},{},{},{}", block.block, i + 1, j, value);
                }
            }
        }
        out
    }

    /// Inverse of [`HeatmapReport::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self, IntrospectError> {
        let mut report = HeatmapReport {
            spec_hash: String::new(),
            epoch: 0,
            normalization: String::new(),
            blocks: Vec::new(),
        };
        let mut seen_header = false;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let err = |message: String| IntrospectError::Parse { line, message };
            if let Some(meta) = raw.strip_prefix("# ") {
                let (key, value) = meta
                    .split_once('=')
                    .ok_or_else(|| err(format!("bad metadata {meta:?}")))?;
                match key {
                    "spec_hash" => report.spec_hash = value.to_string(),
                    "epoch" => {
                        report.epoch = value.parse().map_err(|e| err(format!("epoch: {e}")))?
                    }
                    "normalization" => report.normalization = value.to_string(),
                    other => return Err(err(format!("unknown metadata key {other:?}"))),
                }
                continue;
            }
            if !seen_header {
                if raw != "block,target,source,value" {
                    return Err(err(format!("expected header, found {raw:?}")));
                }
                seen_header = true;
                continue;
            }
            let fields: Vec<&str> = raw.split(',').collect();
            let [block, target, source, value] = fields[..] else {
                return Err(err(format!("expected 4 fields, found {}", fields.len())));
            };
            let index =
                |s: &str, what: &str| s.parse::<usize>().map_err(|e| err(format!("{what}: {e}")));
            let (block, target, source) = (
                index(block, "block")?,
                index(target, "target")?,
                index(source, "source")?,
            );
            let value = if value == ABSENT {
                None
            } else {
                Some(
                    value
                        .parse::<f64>()
                        .map_err(|e| err(format!("value: {e}")))?,
                )
            };
            if report.blocks.last().is_none_or(|b| b.block != block) {
                report.blocks.push(BlockHeatmap {
                    block,
                    rows: Vec::new(),
                });
            }
            let rows = &mut report.blocks.last_mut().expect("just pushed").rows;
            if target == rows.len() + 1 && source == 0 {
                rows.push(Vec::new());
            }
            let current = rows.len();
            match rows.last_mut().filter(|_| target == current) {
                Some(row) if source == row.len() => row.push(value),
                _ => return Err(err(format!("cell ({target},{source}) is out of order"))),
            }
        }
        if !seen_header {
            return Err(IntrospectError::Parse {
                line: text.lines().count(),
                message: "missing header".into(),
            });
        }
        Ok(report)
    }

    /// Binary PGM (P5) with blocks stacked vertically and one white cell row
    /// between them. Absent cells are white (255); present values map
    /// linearly from 0 (lightest, 254) to 1 (black, 0).
    pub fn to_pgm(&self) -> Vec<u8> {
        let cols = self
            .blocks
            .iter()
            .flat_map(|b| b.rows.iter().map(Vec::len))
            .max()
            .unwrap_or(0);
        let mut cells: Vec<Vec<u8>> = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            if b > 0 {
                cells.push(vec![255; cols]);
            }
            for row in &block.rows {
                let mut line = vec![255u8; cols];
                for (j, cell) in row.iter().enumerate() {
                    if let Some(v) = cell {
                        line[j] = (254.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8;
                    }
                }
                cells.push(line);
            }
        }
        let (width, height) = (cols * PGM_CELL, cells.len() * PGM_CELL);
        let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
        for line in &cells {
            let pixels: Vec<u8> = line.iter().flat_map(|&p| [p; PGM_CELL]).collect();
            for _ in 0..PGM_CELL {
                out.extend_from_slice(&pixels);
            }
        }
        out
    }
}

/// Writes `report` to `path` in the requested format.
pub fn export_heatmap(
    report: &HeatmapReport,
    path: &Path,
    format: HeatmapFormat,
) -> Result<(), IntrospectError> {
    let bytes = match format {
        HeatmapFormat::Csv => report.to_csv().into_bytes(),
        HeatmapFormat::Pgm => report.to_pgm(),
    };
    fs::write(path, bytes).map_err(|source| IntrospectError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slice_means_by_range() {
        // two output filters, three input channels, 1x1
        let k = Tensor::new(vec![2, 3, 1, 1], vec![1.0, -2.0, 3.0, -1.0, 2.0, -5.0]).unwrap();
        let m = slice_means(&k, &[1, 2]).unwrap();
        assert_eq!(m, vec![1.0, 3.0]);
        assert!(slice_means(&k, &[1, 1]).is_none());
    }

    #[test]
    fn normalization_rules() {
        let mut row = vec![Some(2.0), None, Some(4.0), Some(3.0)];
        normalize_row(&mut row);
        assert_eq!(row, vec![Some(0.0), None, Some(1.0), Some(0.5)]);
        let mut flat = vec![Some(0.3), None, Some(0.3)];
        normalize_row(&mut flat);
        assert_eq!(flat, vec![Some(1.0), None, Some(1.0)]);
    }

    #[test]
    fn format_parses() {
        assert_eq!("pgm".parse::<HeatmapFormat>().unwrap(), HeatmapFormat::Pgm);
        assert!("png".parse::<HeatmapFormat>().is_err());
    }
}
