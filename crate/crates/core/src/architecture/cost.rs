use serde::{Deserialize, Serialize};

use super::plan::{plan_network, run_shapes, FeatureShape, NetworkPlan, Op};
use super::{ArchError, NetworkSpec};
use crate::topology::TopologyKind;

/// Cost of one planned component (stem, layer, projection, transition or head).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEntry {
    pub layer: String,
    /// 1-based block; 0 for the stem, `blocks + 1` for the head.
    pub block: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub entries: Vec<CostEntry>,
    pub total_params: u64,
    pub total_flops: u64,
}

fn cost_of(ops: &[Op], input: FeatureShape) -> Result<(u64, u64), ArchError> {
    let mut shape = input;
    let (mut params, mut flops) = (0, 0);
    for op in ops {
        let out = op.output_shape(shape)?;
        params += op.params();
        flops += op.flops(out);
        shape = out;
    }
    Ok((params, flops))
}

/// Exact parameter and FLOP accounting for a plan.
pub fn analyze(plan: &NetworkPlan) -> Result<CostReport, ArchError> {
    let mut entries = Vec::new();
    let mut push =
        |layer: String, block: usize, ops: &[Op], input: FeatureShape| -> Result<(), ArchError> {
            let (params, flops) = cost_of(ops, input)?;
            let out = run_shapes(ops, input)?;
            entries.push(CostEntry {
                layer,
                block,
                in_channels: input.channels,
                out_channels: out.channels,
                params,
                flops,
            });
            Ok(())
        };

    push("stem".into(), 0, &plan.stem.ops, plan.stem.input)?;
    let mut last_block = 0;
    for (i, scope) in plan.scopes.iter().enumerate() {
        for layer in &scope.layers {
            let input = FeatureShape::new(layer.in_channels, layer.spatial.0, layer.spatial.1);
            push(layer.name(), layer.block, &layer.ops, input)?;
            for proj in scope.projections.iter().filter(|p| p.dst == layer.node) {
                push(
                    format!("proj{}to{}", proj.src, proj.dst),
                    layer.block,
                    &proj.ops,
                    proj.from,
                )?;
            }
            last_block = layer.block;
        }
        for proj in scope
            .projections
            .iter()
            .filter(|p| p.dst == scope.num_nodes)
        {
            push(
                format!("proj{}to{}", proj.src, proj.dst),
                last_block,
                &proj.ops,
                proj.from,
            )?;
        }
        if let Some(t) = plan.transitions.get(i) {
            push(
                format!("transition{}", t.after_block),
                t.after_block,
                &t.ops,
                t.input,
            )?;
        }
    }
    push(
        "head".into(),
        last_block + 1,
        &plan.head.ops,
        plan.head.input,
    )?;

    let total_params = entries.iter().map(|e| e.params).sum();
    let total_flops = entries.iter().map(|e| e.flops).sum();
    Ok(CostReport {
        entries,
        total_params,
        total_flops,
    })
}

impl CostReport {
    /// `layer,block,in_ch,out_ch,params,flops` plus a trailing totals row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,block,in_ch,out_ch,params,flops\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.layer, e.block, e.in_channels, e.out_channels, e.params, e.flops
            ));
        }
        out.push_str(&format!(
            "total,,,,{},{}\n",
            self.total_params, self.total_flops
        ));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn layer_entries(&self) -> impl Iterator<Item = &CostEntry> {
        self.entries.iter().filter(|e| e.layer.starts_with("block"))
    }
}

/// One report per topology at an otherwise identical spec.
pub fn compare_topologies(
    spec: &NetworkSpec,
    kinds: &[TopologyKind],
) -> Result<Vec<(TopologyKind, CostReport)>, ArchError> {
    kinds
        .iter()
        .map(|&kind| {
            let plan = plan_network(&spec.with_topology(kind))?;
            Ok((kind, analyze(&plan)?))
        })
        .collect()
}

/// `topology,total_params,total_flops`, one row per compared topology.
pub fn comparison_csv(rows: &[(TopologyKind, CostReport)]) -> String {
    let mut out = String::from("topology,total_params,total_flops\n");
    for (kind, report) in rows {
        out.push_str(&format!(
            "{kind},{},{}\n",
            report.total_params, report.total_flops
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::architecture::presets;

    #[test]
    fn single_conv_closed_form() {
        let op = Op::Conv {
            in_channels: 3,
            out_channels: 16,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let (params, flops) = cost_of(&[op], FeatureShape::new(3, 32, 32)).unwrap();
        assert_eq!(params, 432);
        assert_eq!(flops, 884_736);
    }

    #[test]
    fn totals_are_sums_of_entries() {
        let spec = presets::cifar_concat(TopologyKind::Sparse(2), &[6, 6], &[8, 16], true);
        let report = analyze(&plan_network(&spec).unwrap()).unwrap();
        assert_eq!(
            report.total_params,
            report.entries.iter().map(|e| e.params).sum::<u64>()
        );
        assert_eq!(
            report.total_flops,
            report.entries.iter().map(|e| e.flops).sum::<u64>()
        );
        assert_eq!(report.entries.first().unwrap().layer, "stem");
        assert_eq!(report.entries.last().unwrap().layer, "head");
        assert_eq!(report.layer_entries().count(), 12);
    }

    #[test]
    fn csv_layout() {
        let spec = presets::cifar_concat(TopologyKind::Plain, &[1], &[4], false);
        let report = analyze(&plan_network(&spec).unwrap()).unwrap();
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "layer,block,in_ch,out_ch,params,flops");
        // stem 3->16 3x3 conv
        assert_eq!(lines[1], "stem,0,3,16,432,884736");
        // BN(16) + 3x3 conv 16->4
        assert_eq!(
            lines[2],
            format!("block1.layer1,1,16,4,{},{}", 32 + 576, 2 * 1024 * 576)
        );
        assert!(lines.last().unwrap().starts_with("total,,,,"));
        let back: CostReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn sum_family_counts_projections() {
        let spec = presets::cifar_sum(TopologyKind::Plain, &[2, 2], &[16, 32]);
        let report = analyze(&plan_network(&spec).unwrap()).unwrap();
        let proj: Vec<&CostEntry> = report
            .entries
            .iter()
            .filter(|e| e.layer.starts_with("proj"))
            .collect();
        // plain chain: only the first layer of block 2 reads across the boundary
        assert_eq!(proj.len(), 1);
        assert_eq!(proj[0].params, 16 * 32);
        assert_eq!(proj[0].flops, 2 * 16 * 16 * 16 * 32);
    }

    #[test]
    fn comparison_rows() {
        let spec = presets::cifar_concat(TopologyKind::Dense, &[16; 3], &[12; 3], false);
        let rows =
            compare_topologies(&spec, &[TopologyKind::Dense, TopologyKind::Sparse(2)]).unwrap();
        assert!(rows[0].1.total_params > rows[1].1.total_params);
        let csv = comparison_csv(&rows);
        assert!(csv.starts_with("topology,total_params,total_flops\ndense,"));
        assert!(csv.contains("\nsparse:2,"));
    }
}
