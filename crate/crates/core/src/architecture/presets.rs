//! Ready-made specs following the DenseNet / ResNet conventions.

use super::{BlockSpec, Family, InputSpec, NetworkSpec, StemSpec, UnitOrder};
use crate::topology::TopologyKind;

/// Layers per block for a three-block CIFAR network of the given total depth.
///
/// Depth counts the stem, the two transitions and the classifier, plus one
/// (plain) or two (BC) convolutions per layer.
pub fn cifar_layers_per_block(depth: usize, bottleneck: bool) -> Option<usize> {
    let per_layer = if bottleneck { 6 } else { 3 };
    if depth < 4 || (depth - 4) % per_layer != 0 {
        return None;
    }
    Some((depth - 4) / per_layer)
}

fn cifar_input() -> InputSpec {
    InputSpec {
        height: 32,
        width: 32,
        channels: 3,
    }
}

/// Concatenation network on 32x32 inputs. `growth` holds one rate per block.
///
/// The stem width is 16 for plain units and twice the first growth rate for
/// BC units; BC transitions compress by half.
pub fn cifar_concat(
    topology: TopologyKind,
    layers_per_block: &[usize],
    growth: &[usize],
    bottleneck: bool,
) -> NetworkSpec {
    assert_eq!(
        layers_per_block.len(),
        growth.len(),
        "one growth rate per block"
    );
    let stem = if bottleneck { 2 * growth[0] } else { 16 };
    NetworkSpec {
        name: None,
        family: Family::Concat,
        topology,
        blocks: layers_per_block
            .iter()
            .zip(growth)
            .map(|(&num_layers, &growth_rate)| BlockSpec {
                num_layers,
                growth_rate,
                spatial_stride_out: 2,
            })
            .collect(),
        stem: StemSpec {
            out_channels: stem,
            kernel: 3,
            stride: 1,
            max_pool: false,
        },
        num_classes: 10,
        bottleneck,
        compression: if bottleneck { 0.5 } else { 1.0 },
        input: cifar_input(),
        unit_order: UnitOrder::PreActivation,
        cross_block_links: true,
    }
}

/// Three-block CIFAR concatenation network addressed by total depth.
pub fn cifar_concat_depth(
    topology: TopologyKind,
    depth: usize,
    growth: &[usize],
    bottleneck: bool,
) -> NetworkSpec {
    let n = cifar_layers_per_block(depth, bottleneck).expect("depth fits three blocks");
    let growth: Vec<usize> = match growth.len() {
        1 => vec![growth[0]; 3],
        _ => growth.to_vec(),
    };
    cifar_concat(topology, &[n; 3], &growth, bottleneck)
}

/// Summation network on 32x32 inputs with one width per block.
pub fn cifar_sum(
    topology: TopologyKind,
    layers_per_block: &[usize],
    widths: &[usize],
) -> NetworkSpec {
    let mut spec = cifar_concat(topology, layers_per_block, widths, false);
    spec.family = Family::Sum;
    spec.stem.out_channels = widths[0];
    spec
}

/// ImageNet concatenation network with BC units and a 7x7 / max-pool stem,
/// e.g. `[6, 12, 24, 16]` with `k = 32` for the 121-layer variant.
pub fn imagenet_concat(
    topology: TopologyKind,
    layers_per_block: &[usize],
    growth: usize,
) -> NetworkSpec {
    NetworkSpec {
        name: None,
        family: Family::Concat,
        topology,
        blocks: layers_per_block
            .iter()
            .map(|&num_layers| BlockSpec {
                num_layers,
                growth_rate: growth,
                spatial_stride_out: 2,
            })
            .collect(),
        stem: StemSpec {
            out_channels: 2 * growth,
            kernel: 7,
            stride: 2,
            max_pool: true,
        },
        num_classes: 1000,
        bottleneck: true,
        compression: 0.5,
        input: InputSpec {
            height: 224,
            width: 224,
            channels: 3,
        },
        unit_order: UnitOrder::PreActivation,
        cross_block_links: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_to_layers() {
        assert_eq!(cifar_layers_per_block(40, false), Some(12));
        assert_eq!(cifar_layers_per_block(100, false), Some(32));
        assert_eq!(cifar_layers_per_block(100, true), Some(16));
        assert_eq!(cifar_layers_per_block(250, true), Some(41));
        assert_eq!(cifar_layers_per_block(41, false), None);
    }

    #[test]
    fn presets_validate() {
        cifar_concat_depth(TopologyKind::Sparse(2), 100, &[32, 64, 128], true)
            .validate()
            .unwrap();
        cifar_sum(TopologyKind::Dense, &[9, 9, 9], &[16, 32, 64])
            .validate()
            .unwrap();
        imagenet_concat(TopologyKind::Dense, &[6, 12, 24, 16], 32)
            .validate()
            .unwrap();
    }
}
