use serde::{Deserialize, Serialize};

use super::{ArchError, Family, NetworkSpec, UnitOrder};
use crate::tensor::output_extent;
use crate::topology::{build_graph, predecessors, AggregationGraph, TopologyKind};

/// Channels and spatial extent of one feature map (batch dimension omitted).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FeatureShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        FeatureShape {
            channels,
            height,
            width,
        }
    }

    fn with_channels(self, channels: usize) -> Self {
        FeatureShape { channels, ..self }
    }
}

/// One primitive inside a functional unit, stem, transition or head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    BatchNorm {
        channels: usize,
    },
    Relu,
    /// Bias-free convolution (the following batch norm absorbs it).
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    /// Fully connected layer with bias.
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

impl Op {
    pub fn output_shape(&self, input: FeatureShape) -> Result<FeatureShape, ArchError> {
        let spatial = |k: usize, s: usize, p: usize| -> Result<(usize, usize), ArchError> {
            match (
                output_extent(input.height, k, s, p),
                output_extent(input.width, k, s, p),
            ) {
                (Some(h), Some(w)) => Ok((h, w)),
                _ => Err(ArchError::Shape(format!(
                    "{self:?} does not fit a {}x{} input",
                    input.height, input.width
                ))),
            }
        };
        let expect_channels = |c: usize| -> Result<(), ArchError> {
            if c != input.channels {
                return Err(ArchError::Shape(format!(
                    "{self:?} expects {c} channels, got {}",
                    input.channels
                )));
            }
            Ok(())
        };
        match *self {
            Op::BatchNorm { channels } => {
                expect_channels(channels)?;
                Ok(input)
            }
            Op::Relu => Ok(input),
            Op::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                expect_channels(in_channels)?;
                let (h, w) = spatial(kernel, stride, padding)?;
                Ok(FeatureShape::new(out_channels, h, w))
            }
            Op::MaxPool {
                kernel,
                stride,
                padding,
            } => {
                let (h, w) = spatial(kernel, stride, padding)?;
                Ok(FeatureShape::new(input.channels, h, w))
            }
            Op::AvgPool { kernel, stride } => {
                let (h, w) = spatial(kernel, stride, 0)?;
                Ok(FeatureShape::new(input.channels, h, w))
            }
            Op::GlobalAvgPool => Ok(FeatureShape::new(input.channels, 1, 1)),
            Op::Linear {
                in_features,
                out_features,
            } => {
                let flat = input.channels * input.height * input.width;
                if flat != in_features {
                    return Err(ArchError::Shape(format!(
                        "linear layer expects {in_features} features, got {flat}"
                    )));
                }
                Ok(FeatureShape::new(out_features, 1, 1))
            }
        }
    }

    /// Learnable parameters: conv weights, BN scale and shift, linear weight and bias.
    pub fn params(&self) -> u64 {
        match *self {
            Op::BatchNorm { channels } => 2 * channels as u64,
            Op::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => (in_channels * out_channels * kernel * kernel) as u64,
            Op::Linear {
                in_features,
                out_features,
            } => (in_features * out_features + out_features) as u64,
            _ => 0,
        }
    }

    /// 2 x multiply-accumulates; only convolutions and linear layers count.
    pub fn flops(&self, output: FeatureShape) -> u64 {
        match *self {
            Op::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                2 * (output.height * output.width) as u64
                    * (out_channels * in_channels * kernel * kernel) as u64
            }
            Op::Linear {
                in_features,
                out_features,
            } => 2 * (in_features * out_features) as u64,
            _ => 0,
        }
    }
}

/// Propagates `input` through `ops`, returning the final shape.
pub(crate) fn run_shapes(ops: &[Op], input: FeatureShape) -> Result<FeatureShape, ArchError> {
    ops.iter()
        .try_fold(input, |shape, op| op.output_shape(shape))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StemPlan {
    pub input: FeatureShape,
    pub output: FeatureShape,
    pub ops: Vec<Op>,
}

/// A resolved functional unit `F_l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    /// 1-based block index.
    pub block: usize,
    /// 1-based layer index within the block.
    pub layer: usize,
    /// Node index inside the owning scope's graph.
    pub node: usize,
    /// Aggregated nodes, nearest first.
    pub sources: Vec<usize>,
    /// Channel count contributed by each source (same order as `sources`).
    pub source_channels: Vec<usize>,
    pub in_channels: usize,
    /// Width of the 1x1 bottleneck (4k) for BC units, 0 otherwise.
    pub bottleneck_channels: usize,
    pub out_channels: usize,
    pub spatial: (usize, usize),
    pub ops: Vec<Op>,
}

impl LayerPlan {
    pub fn name(&self) -> String {
        format!("block{}.layer{}", self.block, self.layer)
    }
}

/// 1x1 projection applied to an aggregation link whose source shape differs
/// from the consumer's (sum / average families across block boundaries).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionPlan {
    pub src: usize,
    /// Consumer node; `num_nodes` denotes the scope exit.
    pub dst: usize,
    pub from: FeatureShape,
    pub to: FeatureShape,
    pub ops: Vec<Op>,
}

/// Region of the network that shares one aggregation graph. Node 0 is the
/// scope input; nodes `1..num_nodes` are the layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopePlan {
    pub index: usize,
    pub blocks: Vec<usize>,
    pub topology: TopologyKind,
    pub num_nodes: usize,
    pub node_shapes: Vec<FeatureShape>,
    pub layers: Vec<LayerPlan>,
    pub projections: Vec<ProjectionPlan>,
    /// Nodes aggregated when leaving the scope (virtual node `num_nodes`).
    pub exit_sources: Vec<usize>,
    pub exit_shape: FeatureShape,
}

impl ScopePlan {
    pub fn graph(&self) -> AggregationGraph {
        build_graph(self.topology, self.num_nodes).expect("planned topology is valid")
    }

    /// Shape every input of node `dst` must have before aggregation.
    pub fn target_shape(&self, dst: usize) -> FeatureShape {
        if dst == self.num_nodes {
            self.exit_shape
        } else {
            self.node_shapes[dst]
        }
    }

    pub fn projection(&self, src: usize, dst: usize) -> Option<&ProjectionPlan> {
        self.projections
            .iter()
            .find(|p| p.src == src && p.dst == dst)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionPlan {
    /// 1-based index of the block this transition closes.
    pub after_block: usize,
    pub input: FeatureShape,
    pub output: FeatureShape,
    pub ops: Vec<Op>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadPlan {
    pub input: FeatureShape,
    pub num_classes: usize,
    pub ops: Vec<Op>,
}

/// Fully shaped network: stem, aggregation scopes joined by transitions, head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkPlan {
    pub family: Family,
    pub stem: StemPlan,
    pub scopes: Vec<ScopePlan>,
    /// `transitions[i]` connects `scopes[i]` to `scopes[i + 1]`.
    pub transitions: Vec<TransitionPlan>,
    pub head: HeadPlan,
}

impl NetworkPlan {
    pub fn layers(&self) -> impl Iterator<Item = &LayerPlan> {
        self.scopes.iter().flat_map(|s| s.layers.iter())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plan serializes")
    }
}

fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Op {
    Op::Conv {
        in_channels,
        out_channels,
        kernel,
        stride,
        padding: kernel / 2,
    }
}

/// Normalized, activated convolution in the requested order.
fn norm_act_conv(order: UnitOrder, conv_op: Op, ops: &mut Vec<Op>) {
    let (cin, cout) = match conv_op {
        Op::Conv {
            in_channels,
            out_channels,
            ..
        } => (in_channels, out_channels),
        _ => unreachable!("only convolutions are wrapped"),
    };
    match order {
        UnitOrder::PreActivation => {
            ops.extend([Op::BatchNorm { channels: cin }, Op::Relu, conv_op]);
        }
        UnitOrder::PostActivation => {
            ops.extend([conv_op, Op::BatchNorm { channels: cout }, Op::Relu]);
        }
    }
}

fn unit_ops(spec: &NetworkSpec, in_channels: usize, out_channels: usize) -> (Vec<Op>, usize) {
    let mut ops = Vec::new();
    if spec.bottleneck {
        let inner = 4 * out_channels;
        norm_act_conv(spec.unit_order, conv(in_channels, inner, 1, 1), &mut ops);
        norm_act_conv(spec.unit_order, conv(inner, out_channels, 3, 1), &mut ops);
        (ops, inner)
    } else {
        norm_act_conv(
            spec.unit_order,
            conv(in_channels, out_channels, 3, 1),
            &mut ops,
        );
        (ops, 0)
    }
}

fn transition_ops(
    spec: &NetworkSpec,
    in_channels: usize,
    out_channels: usize,
    stride: usize,
) -> Vec<Op> {
    let mut ops = Vec::new();
    norm_act_conv(
        spec.unit_order,
        conv(in_channels, out_channels, 1, 1),
        &mut ops,
    );
    if stride > 1 {
        ops.push(Op::AvgPool {
            kernel: stride,
            stride,
        });
    }
    ops
}

fn stem_plan(spec: &NetworkSpec) -> Result<StemPlan, ArchError> {
    let input = FeatureShape::new(spec.input.channels, spec.input.height, spec.input.width);
    let s = &spec.stem;
    let stem_conv = conv(input.channels, s.out_channels, s.kernel, s.stride);
    let ops = if s.max_pool {
        vec![
            stem_conv,
            Op::BatchNorm {
                channels: s.out_channels,
            },
            Op::Relu,
            Op::MaxPool {
                kernel: 3,
                stride: 2,
                padding: 1,
            },
        ]
    } else {
        let mut ops = Vec::new();
        match spec.unit_order {
            UnitOrder::PreActivation => ops.push(stem_conv),
            UnitOrder::PostActivation => norm_act_conv(spec.unit_order, stem_conv, &mut ops),
        }
        ops
    };
    let output = run_shapes(&ops, input)?;
    Ok(StemPlan { input, output, ops })
}

fn head_plan(spec: &NetworkSpec, input: FeatureShape) -> Result<HeadPlan, ArchError> {
    let mut ops = Vec::new();
    if spec.unit_order == UnitOrder::PreActivation {
        ops.extend([
            Op::BatchNorm {
                channels: input.channels,
            },
            Op::Relu,
        ]);
    }
    ops.extend([
        Op::GlobalAvgPool,
        Op::Linear {
            in_features: input.channels,
            out_features: spec.num_classes,
        },
    ]);
    run_shapes(&ops, input)?;
    Ok(HeadPlan {
        input,
        num_classes: spec.num_classes,
        ops,
    })
}

fn layer_plan(
    spec: &NetworkSpec,
    block: usize,
    layer: usize,
    node: usize,
    sources: Vec<usize>,
    node_shapes: &[FeatureShape],
    target: FeatureShape,
) -> Result<LayerPlan, ArchError> {
    let concat = spec.family == Family::Concat;
    let source_channels: Vec<usize> = if concat {
        sources.iter().map(|&s| node_shapes[s].channels).collect()
    } else {
        vec![target.channels; sources.len()]
    };
    let in_channels = if concat {
        source_channels.iter().sum()
    } else {
        target.channels
    };
    let k = spec.blocks[block - 1].growth_rate;
    let (ops, bottleneck_channels) = unit_ops(spec, in_channels, k);
    let out = run_shapes(&ops, target.with_channels(in_channels))?;
    if (out.height, out.width) != (target.height, target.width) {
        return Err(ArchError::Shape(format!(
            "block{block}.layer{layer} changes spatial size"
        )));
    }
    Ok(LayerPlan {
        block,
        layer,
        node,
        sources,
        source_channels,
        in_channels,
        bottleneck_channels,
        out_channels: out.channels,
        spatial: (out.height, out.width),
        ops,
    })
}

/// Resolves `spec` into a fully shaped plan.
pub fn plan_network(spec: &NetworkSpec) -> Result<NetworkPlan, ArchError> {
    spec.validate()?;
    if let TopologyKind::Fractal(_) = spec.topology {
        return Err(ArchError::UnsupportedTopology(spec.topology));
    }
    let stem = stem_plan(spec)?;
    let (scopes, transitions, exit) = match spec.family {
        Family::Concat => plan_per_block(spec, stem.output)?,
        Family::Sum | Family::Average if spec.cross_block_links => {
            plan_cross_block(spec, stem.output)?
        }
        Family::Sum | Family::Average => plan_per_block(spec, stem.output)?,
    };
    let head = head_plan(spec, exit)?;
    Ok(NetworkPlan {
        family: spec.family,
        stem,
        scopes,
        transitions,
        head,
    })
}

type Scoped = (Vec<ScopePlan>, Vec<TransitionPlan>, FeatureShape);

fn plan_per_block(spec: &NetworkSpec, stem_out: FeatureShape) -> Result<Scoped, ArchError> {
    let concat = spec.family == Family::Concat;
    let mut scopes = Vec::new();
    let mut transitions = Vec::new();
    let mut current = stem_out;
    for (b, block) in spec.blocks.iter().enumerate() {
        let block_no = b + 1;
        if !concat && current.channels != block.growth_rate {
            return Err(ArchError::WidthMismatch(format!(
                "block {block_no} has width {} but its input has {} channels; \
                 enable cross_block_links to project mismatched links",
                block.growth_rate, current.channels
            )));
        }
        let n = block.num_layers;
        let mut node_shapes = vec![current];
        let mut layers = Vec::with_capacity(n);
        for l in 1..=n {
            let sources = predecessors(spec.topology, l)?;
            let target = current.with_channels(block.growth_rate);
            let lp = layer_plan(spec, block_no, l, l, sources, &node_shapes, target)?;
            node_shapes.push(FeatureShape::new(
                lp.out_channels,
                lp.spatial.0,
                lp.spatial.1,
            ));
            layers.push(lp);
        }
        let exit_sources = predecessors(spec.topology, n + 1)?;
        let exit_channels = if concat {
            exit_sources.iter().map(|&s| node_shapes[s].channels).sum()
        } else {
            block.growth_rate
        };
        let exit_shape = current.with_channels(exit_channels);
        scopes.push(ScopePlan {
            index: b,
            blocks: vec![block_no],
            topology: spec.topology,
            num_nodes: n + 1,
            node_shapes,
            layers,
            projections: Vec::new(),
            exit_sources,
            exit_shape,
        });
        if let Some(next) = spec.blocks.get(b + 1) {
            let out_channels = if concat {
                ((spec.compression * exit_channels as f64).floor() as usize).max(1)
            } else {
                next.growth_rate
            };
            let ops = transition_ops(spec, exit_channels, out_channels, block.spatial_stride_out);
            let output = run_shapes(&ops, exit_shape)?;
            transitions.push(TransitionPlan {
                after_block: block_no,
                input: exit_shape,
                output,
                ops,
            });
            current = output;
        } else {
            current = exit_shape;
        }
    }
    Ok((scopes, transitions, current))
}

fn projection_plan(
    src: usize,
    dst: usize,
    from: FeatureShape,
    to: FeatureShape,
) -> Result<ProjectionPlan, ArchError> {
    let stride = (from.height / to.height).max(1);
    let op = Op::Conv {
        in_channels: from.channels,
        out_channels: to.channels,
        kernel: 1,
        stride,
        padding: 0,
    };
    let got = op.output_shape(from)?;
    if got != to {
        return Err(ArchError::Shape(format!(
            "cannot project node {src} ({from:?}) onto node {dst} ({to:?}) with a strided 1x1 convolution"
        )));
    }
    Ok(ProjectionPlan {
        src,
        dst,
        from,
        to,
        ops: vec![op],
    })
}

fn plan_cross_block(spec: &NetworkSpec, stem_out: FeatureShape) -> Result<Scoped, ArchError> {
    // one scope over the whole network, indexed globally; node 0 is the stem
    let mut block_shapes = Vec::with_capacity(spec.blocks.len());
    let (mut h, mut w) = (stem_out.height, stem_out.width);
    for (b, block) in spec.blocks.iter().enumerate() {
        if h == 0 || w == 0 {
            return Err(ArchError::Shape(format!(
                "block {} has empty spatial extent",
                b + 1
            )));
        }
        block_shapes.push(FeatureShape::new(block.growth_rate, h, w));
        h /= block.spatial_stride_out;
        w /= block.spatial_stride_out;
    }
    let total = spec.total_layers();
    let mut node_shapes = vec![stem_out];
    let mut node_block = vec![0usize];
    let mut layers = Vec::with_capacity(total);
    let mut projections = Vec::new();
    let mut node = 0;
    for (b, block) in spec.blocks.iter().enumerate() {
        for l in 1..=block.num_layers {
            node += 1;
            let target = block_shapes[b];
            let sources = predecessors(spec.topology, node)?;
            for &s in &sources {
                if node_shapes[s] != target {
                    projections.push(projection_plan(s, node, node_shapes[s], target)?);
                }
            }
            let lp = layer_plan(spec, b + 1, l, node, sources, &node_shapes, target)?;
            node_shapes.push(FeatureShape::new(
                lp.out_channels,
                lp.spatial.0,
                lp.spatial.1,
            ));
            node_block.push(b + 1);
            layers.push(lp);
        }
    }
    let exit_shape = *block_shapes.last().expect("at least one block");
    let exit_sources = predecessors(spec.topology, total + 1)?;
    for &s in &exit_sources {
        if node_shapes[s] != exit_shape {
            projections.push(projection_plan(s, total + 1, node_shapes[s], exit_shape)?);
        }
    }
    let scope = ScopePlan {
        index: 0,
        blocks: (1..=spec.blocks.len()).collect(),
        topology: spec.topology,
        num_nodes: total + 1,
        node_shapes,
        layers,
        projections,
        exit_sources,
        exit_shape,
    };
    Ok((vec![scope], Vec::new(), exit_shape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::architecture::presets;

    #[test]
    fn densenet_width_schedule() {
        let spec = presets::cifar_concat(TopologyKind::Dense, &[12; 3], &[12; 3], false);
        let plan = plan_network(&spec).unwrap();
        let first: Vec<usize> = plan.scopes[0]
            .layers
            .iter()
            .take(3)
            .map(|l| l.in_channels)
            .collect();
        assert_eq!(first, vec![16, 28, 40]);
        assert_eq!(plan.scopes[0].exit_shape.channels, 16 + 12 * 12);
        assert_eq!(plan.transitions[0].output.channels, 160);
        assert_eq!(plan.transitions[0].output.height, 16);
    }

    #[test]
    fn sparse_in_channels_follow_predecessors() {
        let spec = presets::cifar_concat(TopologyKind::Sparse(2), &[12; 3], &[12; 3], false);
        let plan = plan_network(&spec).unwrap();
        let l6 = &plan.scopes[0].layers[5];
        assert_eq!(l6.sources, vec![5, 4, 2]);
        assert_eq!(l6.in_channels, 36);
        // layer 4 reads the stem output
        assert_eq!(plan.scopes[0].layers[3].in_channels, 12 + 12 + 16);
    }

    #[test]
    fn sum_family_keeps_block_width() {
        let spec = presets::cifar_sum(TopologyKind::Sparse(2), &[5, 5, 5], &[16, 32, 64]);
        let plan = plan_network(&spec).unwrap();
        for layer in plan.layers() {
            assert_eq!(layer.in_channels, [16, 32, 64][layer.block - 1]);
            assert_eq!(layer.out_channels, layer.in_channels);
        }
        assert_eq!(plan.scopes.len(), 1);
        // every link into block 2 or 3 from an earlier block is projected
        let scope = &plan.scopes[0];
        for layer in &scope.layers {
            for &s in &layer.sources {
                let crosses = scope.node_shapes[s] != scope.node_shapes[layer.node];
                assert_eq!(crosses, scope.projection(s, layer.node).is_some());
            }
        }
        assert!(!scope.projections.is_empty());
    }

    #[test]
    fn sum_family_without_cross_links_needs_matching_stem() {
        let mut spec = presets::cifar_sum(TopologyKind::Dense, &[3, 3], &[16, 32]);
        spec.cross_block_links = false;
        let plan = plan_network(&spec).unwrap();
        assert_eq!(plan.scopes.len(), 2);
        assert_eq!(plan.transitions[0].output.channels, 32);
        spec.stem.out_channels = 8;
        assert!(matches!(
            plan_network(&spec),
            Err(ArchError::WidthMismatch(_))
        ));
    }

    #[test]
    fn fractal_is_rejected() {
        let spec = presets::cifar_concat(TopologyKind::Fractal(3), &[4], &[8], false);
        assert!(matches!(
            plan_network(&spec),
            Err(ArchError::UnsupportedTopology(_))
        ));
    }

    #[test]
    fn bottleneck_units_and_compression() {
        let spec = presets::cifar_concat(TopologyKind::Dense, &[4, 4], &[8, 8], true);
        let plan = plan_network(&spec).unwrap();
        let layer = &plan.scopes[0].layers[0];
        assert_eq!(layer.bottleneck_channels, 32);
        assert_eq!(layer.in_channels, 16);
        assert_eq!(
            layer.ops,
            vec![
                Op::BatchNorm { channels: 16 },
                Op::Relu,
                Op::Conv {
                    in_channels: 16,
                    out_channels: 32,
                    kernel: 1,
                    stride: 1,
                    padding: 0
                },
                Op::BatchNorm { channels: 32 },
                Op::Relu,
                Op::Conv {
                    in_channels: 32,
                    out_channels: 8,
                    kernel: 3,
                    stride: 1,
                    padding: 1
                },
            ]
        );
        // 16 + 4 * 8 = 48 channels compressed by half
        assert_eq!(plan.transitions[0].output.channels, 24);
    }

    #[test]
    fn post_activation_order() {
        let mut spec = presets::cifar_concat(TopologyKind::Plain, &[2], &[4], false);
        spec.unit_order = UnitOrder::PostActivation;
        let plan = plan_network(&spec).unwrap();
        assert!(matches!(plan.scopes[0].layers[0].ops[0], Op::Conv { .. }));
        assert_eq!(plan.head.ops[0], Op::GlobalAvgPool);
        assert_eq!(plan.stem.ops.len(), 3);
    }

    #[test]
    fn imagenet_stem_shapes() {
        let spec = presets::imagenet_concat(TopologyKind::Dense, &[6, 12, 24, 16], 32);
        let plan = plan_network(&spec).unwrap();
        assert_eq!(plan.stem.output, FeatureShape::new(64, 56, 56));
        assert_eq!(plan.head.input, FeatureShape::new(1024, 7, 7));
    }

    #[test]
    fn plan_is_deterministic() {
        let spec = presets::cifar_concat(TopologyKind::Sparse(3), &[7, 7], &[6, 12], true);
        assert_eq!(
            plan_network(&spec).unwrap().to_json(),
            plan_network(&spec.clone()).unwrap().to_json()
        );
    }
}
